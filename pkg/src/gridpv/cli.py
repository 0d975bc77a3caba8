"""``gridpv`` command-line entry point.

Configuration is merged as defaults < ``--config`` file < ``--set`` and the
dedicated flags. Logs go to stderr; JSON results go to ``--out`` or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import traceback
from pathlib import Path

import numpy as np

from . import config as cfg
from . import encoding, features, geodata, phases, synthcity, tiler

log = logging.getLogger("gridpv")

EXIT_OK, EXIT_ERROR, EXIT_UNMET = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="key = value configuration file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    g.add_argument("--seed", type=int, help="overrides the 'seed' key")
    g.add_argument("--jobs", type=int, help="worker threads; overrides the 'jobs' key")
    g.add_argument("--out", help="write JSON results here instead of stdout")
    g.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    return p


def _epilog(keys) -> str:
    return "configuration keys:\n" + cfg.describe(keys)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="gridpv", description="Grid-based rooftop PV classification pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add(name, help_, keys=cfg.PIPELINE_KEYS):
        return sub.add_parser(name, help=help_, description=help_, parents=[common],
                              epilog=_epilog(keys), formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("ingest", "clip rooftops from a raster + footprints into the prepared layout")
    p.add_argument("--raster", required=True)
    p.add_argument("--world-file")
    p.add_argument("--footprints", required=True)
    p.add_argument("--labels", required=True, help="CSV with rooftop_id,label")
    p.add_argument("--city", required=True)
    p.add_argument("--data-root", help="overrides 'data.root'")
    p.add_argument("--train-fraction", type=float, default=0.7)

    p = add("tile", "grid-tile the rooftops of a prepared city")
    p.add_argument("--city", required=True)
    p.add_argument("--grid-size", type=int, required=True)
    p.add_argument("--data-root")
    p.add_argument("--stats", action="store_true", help="plain-text city, rooftop_id, kept/total report")

    p = add("extract", "write a feature file for a prepared city")
    p.add_argument("--city", required=True)
    p.add_argument("--grid-size", type=int, help="tile size; omit for whole-rooftop (BR) features")
    p.add_argument("--data-root")
    p.add_argument("--features-dir", required=True)

    p = add("encode", "fit a codebook or GMM on feature files and encode their rooftops")
    p.add_argument("--features", required=True, help="comma-separated feature files")
    p.add_argument("--encoder", choices=[e.value for e in encoding.Encoder if e is not encoding.Encoder.BR],
                   default="vlad")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--codebook", help="write the fitted codebook/GMM here")

    for name, text in (("train", "run a Phase-3 grid search on the combined cities as one registry step"),
                       ("evaluate", "score the latest best model of a registry on the combined test splits"),
                       ("phase-run", "run the three-phase protocol over cities in arrival order"),
                       ("compare", "run every aggregator on the same cities and print a comparison table")):
        p = add(name, text)
        p.add_argument("--cities", required=True, help="comma-separated, arrival order")
        p.add_argument("--data-root")
        if name != "compare":
            p.add_argument("--approach", help="overrides 'approach'")
        p.add_argument("--registry", required=(name != "compare"))

    p = add("synth-gen", "generate seeded synthetic cities", cfg.SYNTH_KEYS)
    p.add_argument("--spec", help="city spec file (same grammar as --config)")
    return parser


# --------------------------------------------------------------------------- helpers

def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "jobs", None) is not None and args.command != "synth-gen":
        out["jobs"] = str(args.jobs)
    if getattr(args, "data_root", None):
        out["data.root"] = args.data_root
    if getattr(args, "approach", None):
        out["approach"] = args.approach
    return out


def _pipeline_values(args) -> dict:
    return cfg.load(args.config, cfg.PIPELINE_KEYS, _overrides(args))


def _emit(args, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=False)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _cities(values, names: str) -> list:
    names = [c.strip() for c in names.split(",") if c.strip()]
    if not names:
        raise UsageError("--cities is empty")
    return [phases.CityData.load(values["data.root"], n) for n in names]


def _load_city(values, name) -> list:
    return geodata.load_city(values["data.root"], name)


# --------------------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    v = _pipeline_values(args)
    raster = geodata.load_raster(args.raster, args.world_file)
    fps = geodata.load_footprints(args.footprints)
    labels = geodata._read_csv_map(Path(args.labels), "rooftop_id", "label")
    rooftops, skipped = [], []
    for fp in fps.entries:
        lab = labels.get(fp.rooftop_id)
        if lab is None:
            raise geodata.GeoDataError(f"no label for rooftop {fp.rooftop_id!r}")
        try:
            rooftops.append(geodata.clip_rooftop(raster, fp, args.city, geodata.Label(lab)))
        except geodata.GeoDataError as exc:
            log.warning("skipping %s: %s", fp.rooftop_id, exc)
            skipped.append(fp.rooftop_id)
    splits = geodata.stratified_split([r.rooftop_id for r in rooftops], [r.label for r in rooftops],
                                      args.train_fraction, v["seed"])
    for r in rooftops:
        r.split = splits[r.rooftop_id]
    base = geodata.write_prepared(v["data.root"], args.city, rooftops)
    _emit(args, {"city": args.city, "path": str(base), "rooftops": len(rooftops), "skipped": skipped})
    return EXIT_OK


def cmd_tile(args) -> int:
    v = _pipeline_values(args)
    rows = []
    for r in _load_city(v, args.city):
        kept, total = tiler.tile_stats(r, args.grid_size, v["min_coverage"])
        rows.append({"rooftop_id": r.rooftop_id, "kept": kept, "total": total})
    if args.stats:
        for row in rows:
            sys.stdout.write(f"{args.city}\t{row['rooftop_id']}\t{row['kept']}/{row['total']}\n")
        if args.out:
            _emit(args, {"city": args.city, "grid_size": args.grid_size, "rooftops": rows})
    else:
        _emit(args, {"city": args.city, "grid_size": args.grid_size, "rooftops": rows})
    return EXIT_OK


def cmd_extract(args) -> int:
    v = _pipeline_values(args)
    conf = phases.PipelineConfig.from_values(v)
    city = phases.CityData.load(v["data.root"], args.city)
    store = phases.FeatureStore(conf)
    sets = list(store.get(city, args.grid_size).values())
    out = Path(args.features_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / features.feature_file_name(args.city, args.grid_size)
    features.save_features(sets, path, args.city, conf.extractor.name)
    _emit(args, {"city": args.city, "path": str(path), "rooftops": len(sets), "dim": sets[0].dim if sets else 0})
    return EXIT_OK


def cmd_encode(args) -> int:
    v = _pipeline_values(args)
    sets = []
    for p in args.features.split(","):
        sets.extend(features.load_features(p.strip()))
    if not sets:
        raise encoding.EncodingError("no feature vectors")
    enc = encoding.Encoder(args.encoder)
    q = None
    if enc is not encoding.Encoder.AVG:
        X = encoding.subsample_pool(np.vstack([s.vectors for s in sets]), v["encoding.pool_cap"], v["seed"])
        prov = {"features": args.features}
        if enc is encoding.Encoder.VLAD:
            q = encoding.kmeans_fit(X, args.k, v["seed"], v["kmeans.max_iter"], v["kmeans.tol"], prov)
        else:
            q = encoding.gmm_fit(X, args.k, v["seed"], v["gmm.max_iter"], v["gmm.tol"], v["gmm.variance_floor"], prov)
        if args.codebook:
            Path(args.codebook).write_bytes(encoding.dumps_quantizer(q))
    descs = {}
    for s in sets:
        if enc is encoding.Encoder.VLAD:
            d = encoding.vlad_encode(q, s, v["encoding.normalize"])
        elif enc is encoding.Encoder.FV:
            d = encoding.fv_encode(q, s, v["encoding.normalize"])
        else:
            d = encoding.avg_encode(s)
        descs[f"{s.city_id}/{s.rooftop_id}"] = [float(x) for x in d.values]
    _emit(args, {"encoder": enc.value, "K": None if q is None else args.k, "descriptors": descs})
    return EXIT_OK


def _registry_dir(args) -> Path:
    return Path(args.registry)


def cmd_train(args) -> int:
    v = _pipeline_values(args)
    conf = phases.PipelineConfig.from_values(v)
    cities = _cities(v, args.cities)
    root = _registry_dir(args)
    reg = phases.ModelRegistry.load(root, conf.approach) if root.exists() else phases.ModelRegistry(root, conf.approach)
    reg.root = root
    out, models, best = phases.run_phase3(reg, cities, conf)
    step = phases.StepRecord(len(reg.steps), cities[-1].name, conf.approach, [c.name for c in cities],
                             grid=conf.grid(), models=models, outcomes=[out], seconds=out.seconds)
    step.model_source = step.best_source = step.index
    step.best_key = best.key
    reg.steps.append(step)
    reg.save_step(step)
    _emit(args, out.to_dict())
    return EXIT_OK if out.stopped else EXIT_UNMET


def cmd_evaluate(args) -> int:
    v = _pipeline_values(args)
    conf = phases.PipelineConfig.from_values(v)
    reg = phases.ModelRegistry.load(_registry_dir(args), conf.approach)
    if not reg.steps:
        raise phases.PhaseError(f"registry holds no {conf.approach.value} steps")
    cities = _cities(v, args.cities)
    runner = phases.Runner(conf)
    pool = [(c, r) for c in cities for r in c.split("test")]
    report = runner.score(reg.best(), pool)
    _emit(args, report.to_dict())
    return EXIT_OK


def _clear_registry(root: Path, approach: phases.Approach) -> None:
    """Drop earlier steps of this approach so a re-run starts from an empty registry."""
    if not root.exists():
        return
    for d in sorted(root.iterdir()):
        best = d / "best.json"
        if not best.exists():
            continue
        doc = json.loads(best.read_text())
        doc.pop(approach.value, None)
        if (d / approach.value).exists():
            shutil.rmtree(d / approach.value)
        if doc:
            best.write_text(json.dumps(doc, indent=2))
        else:
            shutil.rmtree(d)


def cmd_phase_run(args) -> int:
    v = _pipeline_values(args)
    conf = phases.PipelineConfig.from_values(v)
    cities = _cities(v, args.cities)
    root = _registry_dir(args)
    _clear_registry(root, conf.approach)
    reg = phases.ModelRegistry(root, conf.approach)
    report = phases.run_pipeline(cities, conf, reg)
    sys.stderr.write(phases.render_table([report]) + "\n")
    _emit(args, report.to_dict())
    return EXIT_OK if report.all_passed else EXIT_UNMET


def cmd_compare(args) -> int:
    v = _pipeline_values(args)
    conf = phases.PipelineConfig.from_values(v)
    cities = _cities(v, args.cities)
    root = Path(args.registry) if args.registry else None
    if root:
        for a in phases.Approach:
            _clear_registry(root, a)
    reports = phases.compare_approaches(cities, conf, registry_root=root)
    sys.stderr.write(phases.render_table(reports) + "\n")
    _emit(args, phases.comparison_document(reports))
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    path = args.spec or args.config
    overrides = {}
    for item in args.set:
        k, _, val = item.partition("=")
        overrides[k.strip()] = val.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    values = cfg.load(path, cfg.SYNTH_KEYS, overrides, allow_city_keys=True)
    if not args.out:
        raise UsageError("synth-gen needs --out <dir>")
    out = Path(args.out)
    made = []
    for name in values["cities"]:
        spec = synthcity.spec_from_config(name, values, values["seed"], values["scale"])
        base = synthcity.generate_city(spec, out, balance=values["balance"])
        n = len(geodata.load_city(out, name))
        log.info("generated %s: %d rooftops", name, n)
        made.append({"city": name, "path": str(base), "rooftops": n})
    sys.stdout.write(json.dumps({"cities": made}, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "tile": cmd_tile,
    "extract": cmd_extract,
    "encode": cmd_encode,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "phase-run": cmd_phase_run,
    "compare": cmd_compare,
    "synth-gen": cmd_synth_gen,
}


def _origin(exc: BaseException, command: str) -> str:
    """'module.function' of the innermost package frame that raised."""
    pkg = Path(__file__).resolve().parent
    where = f"cli.{command}"
    for fr in traceback.extract_tb(exc.__traceback__):
        p = Path(fr.filename).resolve()
        if p.parent == pkg:
            where = f"{p.stem}.{fr.name}"
    return where


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"gridpv: error: {exc}\n")
        return EXIT_ERROR
    except (Exception, KeyboardInterrupt) as exc:  # noqa: BLE001 - top-level diagnostic
        sys.stderr.write(f"gridpv: error in {_origin(exc, args.command)}: {type(exc).__name__}: {exc}\n")
        if args.verbose > 1:
            traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
