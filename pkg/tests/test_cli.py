import json

import numpy as np
import pytest
from PIL import Image

from gridpv import cli, config as cfg, features, geodata, phases

SMALL = ["--set", "models=lr", "--set", "lr.c=1", "--set", "lr.solver=lbfgs", "--set", "br.size=48",
         "--jobs", "1"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cities")
    spec = root / "spec.cfg"
    lines = ["cities = a,b,c", "seed = 3", "balance = true"]
    for c in "abc":
        lines += [f"{c}.n_with_pv = 5", f"{c}.n_no_pv = 5", f"{c}.roof_size_range = 60,80", f"{c}.pv_cell_grid = 6"]
    spec.write_text("\n".join(lines) + "\n")
    assert cli.main(["synth-gen", "--spec", str(spec), "--out", str(root)]) == 0
    return root


def test_unknown_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["phase-run", "--bogus"])
    out, err = capsys.readouterr()
    assert exc.value.code == 1 and "usage:" in err and not out


def test_missing_command_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 1


@pytest.mark.parametrize("command,keys", [("phase-run", cfg.PIPELINE_KEYS), ("synth-gen", cfg.SYNTH_KEYS)])
def test_help_lists_every_key(capsys, command, keys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    out, _ = capsys.readouterr()
    assert exc.value.code == 0
    for k in keys:
        assert k.name in out


def test_synth_gen_writes_cities(data_root):
    for c in "abc":
        roofs = geodata.load_city(data_root, c)
        assert {r.split for r in roofs} == {"train", "test"}
        assert {r.label for r in roofs} == {geodata.Label.WITH_PV, geodata.Label.NO_PV}


def test_synth_gen_unknown_key(capsys, tmp_path):
    code, _, err = run(capsys, "synth-gen", "--set", "nonsense=1", "--out", tmp_path)
    assert code == 1 and "nonsense" in err


def test_unknown_config_key(capsys, data_root, tmp_path):
    conf = tmp_path / "x.cfg"
    conf.write_text("grid.sizez = 64\n")
    code, _, err = run(capsys, "tile", "--city", "a", "--grid-size", 32, "--data-root", data_root, "--config", conf)
    assert code == 1 and "grid.sizez" in err and "config" in err


def test_bad_set_syntax(capsys, data_root):
    code, _, err = run(capsys, "tile", "--city", "a", "--grid-size", 32, "--data-root", data_root, "--set", "seed")
    assert code == 1 and "KEY=VALUE" in err


def test_missing_city_reports_origin(capsys, data_root):
    code, _, err = run(capsys, "tile", "--city", "nowhere", "--grid-size", 32, "--data-root", data_root)
    assert code == 1 and "error in geodata." in err


def test_tile_stats(capsys, data_root):
    code, out, _ = run(capsys, "tile", "--city", "a", "--grid-size", 32, "--data-root", data_root, "--stats")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == len(geodata.load_city(data_root, "a"))
    for line in lines:
        city, rid, ratio = line.split("\t")
        kept, total = map(int, ratio.split("/"))
        assert city == "a" and 0 <= kept <= total and total >= 1


def test_extract_encode_round_trip(capsys, data_root, tmp_path):
    code, out, _ = run(capsys, "extract", "--city", "a", "--grid-size", 32, "--data-root", data_root,
                       "--features-dir", tmp_path)
    assert code == 0
    doc = json.loads(out)
    sets = features.load_features(doc["path"])
    assert len(sets) == doc["rooftops"] == len(geodata.load_city(data_root, "a"))
    book = tmp_path / "book.bin"
    code, out, _ = run(capsys, "encode", "--features", doc["path"], "--encoder", "vlad", "--k", 2,
                       "--codebook", book)
    assert code == 0 and book.exists()
    enc = json.loads(out)
    assert enc["K"] == 2 and len(enc["descriptors"]) == len(sets)
    d = sets[0].dim
    for vec in enc["descriptors"].values():
        assert len(vec) == 2 * d
        assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-9) or np.linalg.norm(vec) == 0
    code, out, _ = run(capsys, "encode", "--features", doc["path"], "--encoder", "avg")
    assert code == 0 and json.loads(out)["K"] is None


def test_extract_br(capsys, data_root, tmp_path):
    code, out, _ = run(capsys, "extract", "--city", "b", "--data-root", data_root, "--features-dir", tmp_path,
                       "--set", "br.size=48")
    doc = json.loads(out)
    assert code == 0 and all(s.vectors.shape[0] == 1 for s in features.load_features(doc["path"]))


def test_train_then_evaluate(capsys, data_root, tmp_path):
    reg = tmp_path / "reg"
    code, out, _ = run(capsys, "train", "--cities", "a", "--data-root", data_root, "--approach", "br",
                       "--registry", reg, *SMALL)
    assert code in (0, 2)
    trained = json.loads(out)
    assert trained["phase"] == "P3"
    code, out, _ = run(capsys, "evaluate", "--cities", "a", "--data-root", data_root, "--approach", "br",
                       "--registry", reg, *SMALL)
    assert code == 0
    rep = json.loads(out)
    assert set(rep) >= {"per_city", "global_f1", "weighted_f1", "rounded"}
    assert rep["weighted_f1"] == pytest.approx(trained["report"]["weighted_f1"])


def test_evaluate_empty_registry(capsys, data_root, tmp_path):
    code, _, err = run(capsys, "evaluate", "--cities", "a", "--data-root", data_root, "--approach", "br",
                       "--registry", tmp_path / "none")
    assert code == 1 and "error in" in err


@pytest.mark.parametrize("threshold,expected", [("0.0", 0), ("1.0", None)])
def test_phase_run_exit_codes(capsys, data_root, tmp_path, threshold, expected):
    out_file = tmp_path / "report.json"
    code, _, err = run(capsys, "phase-run", "--cities", "a,b,c", "--data-root", data_root, "--approach", "br",
                       "--registry", tmp_path / "reg", "--set", f"threshold={threshold}", "--out", out_file, *SMALL)
    doc = json.loads(out_file.read_text())
    assert "Total time" in err
    assert len(doc["steps"]) == 3
    if expected is not None:
        assert code == expected
    else:
        passed = all(s["stopped"] for s in doc["steps"])
        assert code == (0 if passed else 2)
    # a re-run replaces the registry instead of extending it
    code2, _, _ = run(capsys, "phase-run", "--cities", "a,b,c", "--data-root", data_root, "--approach", "br",
                      "--registry", tmp_path / "reg", "--set", f"threshold={threshold}", "--out", out_file, *SMALL)
    assert code2 == code
    assert len(phases.ModelRegistry.load(tmp_path / "reg", phases.Approach.BR_ML).steps) == 3


def test_compare(capsys, data_root, tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    code, out, err = run(capsys, "compare", "--cities", "a,b", "--data-root", data_root, *SMALL,
                         "--set", "grid.sizes=32", "--set", "vlad.k=2")
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, phases.COMPARISON_SCHEMA)
    assert doc["columns"] == ["a", "a + b"]
    assert all(len(r["weighted_f1"]) == 2 for r in doc["rows"])
    assert {r["approach"] for r in doc["rows"]} == {a.value for a in phases.Approach}


def test_ingest(capsys, tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 255, size=(40, 60, 3), dtype=np.uint8)
    Image.fromarray(px).save(tmp_path / "scene.png")
    (tmp_path / "scene.pgw").write_text(geodata.format_world_file((1.0, 0.0, 100.0, 0.0, -1.0, 200.0)))
    fps = []
    for i in range(6):
        x0 = 100 + 2 + 9 * i
        ring = [[x0, 195], [x0 + 7, 195], [x0 + 7, 185], [x0, 185], [x0, 195]]
        fps.append(geodata.Footprint(f"r{i}", [np.array(ring, dtype=float)]))
    fps.append(geodata.Footprint("outside", [np.array([[0, 0], [5, 0], [5, 5], [0, 0]], dtype=float)]))
    (tmp_path / "fp.geojson").write_text(json.dumps(geodata.footprints_to_geojson(fps)))
    (tmp_path / "labels.csv").write_text("rooftop_id,label\n" + "".join(
        f"r{i},{'with_pv' if i % 2 else 'no_pv'}\n" for i in range(6)) + "outside,no_pv\n")
    code, out, _ = run(capsys, "ingest", "--raster", tmp_path / "scene.png", "--footprints", tmp_path / "fp.geojson",
                       "--labels", tmp_path / "labels.csv", "--city", "x", "--data-root", tmp_path / "prep")
    assert code == 0
    doc = json.loads(out)
    assert doc["rooftops"] == 6 and doc["skipped"] == ["outside"]
    roofs = geodata.load_city(tmp_path / "prep", "x")
    assert len(roofs) == 6 and {r.split for r in roofs} == {"train", "test"}
    assert all(r.valid_mask.any() for r in roofs)
