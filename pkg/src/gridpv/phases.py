"""The three-phase multi-city protocol over a persisted model registry.

For each arriving city:

* Phase-1 scores the previous step's best model on the combined test splits;
* Phase-2 re-scores every stored model of the previous step on the combined
  training splits (used as validation), picks the best and tests it;
* Phase-3 retrains the full hyperparameter grid on the combined training
  splits, refitting codebooks per (grid size, K).

The first city goes straight to Phase-3, and every step stops at the first
phase whose 2-decimal weighted F1 reaches the threshold.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import shutil
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import classify, config as cfg, encoding, features, geodata, tiler
from .classify import Dataset2D, HyperparameterCombo, TrainedModel
from .encoding import Codebook, Encoder, GmmModel
from .evaluation import ScoreReport, score_predictions
from .features import ExtractorKind, ExtractorSpec, LocalFeatureSet
from .geodata import Label, RooftopImage

log = logging.getLogger(__name__)


class PhaseError(RuntimeError):
    pass


class LeakageError(PhaseError):
    pass


class Approach(str, enum.Enum):
    BR_ML = "br"
    BRG_VLAD_ML = "brg-vlad"
    BRG_FV_ML = "brg-fv"
    BRG_AVG_ML = "brg-avg"

    @property
    def encoder(self) -> Encoder:
        return {"br": Encoder.BR, "brg-vlad": Encoder.VLAD, "brg-fv": Encoder.FV,
                "brg-avg": Encoder.AVG}[self.value]

    @property
    def gridded(self) -> bool:
        return self is not Approach.BR_ML

    @property
    def uses_k(self) -> bool:
        return self in (Approach.BRG_VLAD_ML, Approach.BRG_FV_ML)

    @property
    def title(self) -> str:
        return {"br": "BR-ML", "brg-vlad": "BRG-VLAD-ML", "brg-fv": "BRG-FV-ML",
                "brg-avg": "BRG-AVG-ML"}[self.value]


class Phase(str, enum.Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"


# --------------------------------------------------------------------------- configuration

@dataclass
class PipelineConfig:
    approach: Approach = Approach.BRG_VLAD_ML
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    grid_sizes: list = field(default_factory=lambda: [64, 96, 128])
    ks: list = field(default_factory=lambda: [2, 3, 4])
    classifiers: list = field(default_factory=list)
    threshold: float = 0.90
    weight: float = 0.5
    seed: int = 0
    min_coverage: float = tiler.DEFAULT_MIN_COVERAGE
    br_size: int = 224
    normalize: bool = True
    pool_cap: int = encoding.DEFAULT_POOL_CAP
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    gmm_max_iter: int = 100
    gmm_tol: float = 1e-6
    gmm_variance_floor: float = 1e-6
    jobs: int = 1

    def __post_init__(self):
        self.approach = Approach(self.approach)
        if not 0 < self.threshold <= 1 and self.threshold != 0:
            raise cfg.ConfigError("threshold must be in (0, 1]")
        if not self.classifiers:
            raise cfg.ConfigError("empty classifier grid")
        if self.approach.gridded and not self.grid_sizes:
            raise cfg.ConfigError("empty grid-size list")
        if self.approach.uses_k and not self.ks:
            raise cfg.ConfigError("empty K list")

    @classmethod
    def from_values(cls, v: dict, **overrides) -> "PipelineConfig":
        clf = classify.expand_grid(v["models"], v["lr.c"], v["lr.solver"], v["rf.n_estimators"],
                                   v["rf.max_depth"], v["svc.c"], v["svc.kernel"])
        kind = ExtractorKind(v["extractor.kind"])
        ext = ExtractorSpec(kind, v["extractor.input_size"] or None, v["extractor.model_path"] or None,
                            tuple(v["extractor.scale"]), tuple(v["extractor.offset"]))
        jobs = v["jobs"] or (os.cpu_count() or 1)
        kw = dict(approach=v["approach"], extractor=ext, grid_sizes=v["grid.sizes"], ks=v["vlad.k"],
                  classifiers=clf, threshold=v["threshold"], weight=v["weight"], seed=v["seed"],
                  min_coverage=v["min_coverage"], br_size=v["br.size"],
                  normalize=v["encoding.normalize"], pool_cap=v["encoding.pool_cap"],
                  kmeans_max_iter=v["kmeans.max_iter"], kmeans_tol=v["kmeans.tol"],
                  gmm_max_iter=v["gmm.max_iter"], gmm_tol=v["gmm.tol"],
                  gmm_variance_floor=v["gmm.variance_floor"], jobs=jobs)
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def default(cls, **overrides) -> "PipelineConfig":
        return cls.from_values(cfg.resolve(cfg.PIPELINE_KEYS), **overrides)

    def grid(self) -> list:
        """Full Phase-3 grid in its canonical order (grid size, K, classifier)."""
        gs = self.grid_sizes if self.approach.gridded else [None]
        ks = self.ks if self.approach.uses_k else [None]
        out = []
        for g in gs:
            for k in ks:
                for c in self.classifiers:
                    out.append(HyperparameterCombo(**{**c.to_dict(), "grid_size": g, "K": k}))
        return out


# --------------------------------------------------------------------------- data

@dataclass
class CityData:
    name: str
    rooftops: list

    def split(self, which: str) -> list:
        return [r for r in self.rooftops if r.split == which]

    @classmethod
    def load(cls, root, name: str) -> "CityData":
        return cls(name, geodata.load_city(root, name))


_AUG_SUFFIX = re.compile(r"_aug\d+$")
LEAKAGE_CHECKS = Counter()


def check_disjoint(train: Sequence[RooftopImage], test: Sequence[RooftopImage]) -> None:
    """Raise if a rooftop (or an augmented copy of one) sits in both pools."""
    def base(r):
        return (r.city_id, _AUG_SUFFIX.sub("", r.rooftop_id))

    test_ids = {(r.city_id, r.rooftop_id) for r in test}
    train_ids = {(r.city_id, r.rooftop_id) for r in train}
    overlap = (train_ids & test_ids) | ({base(r) for r in train} & test_ids)
    LEAKAGE_CHECKS["runs"] += 1
    if overlap:
        raise LeakageError(f"rooftops in both train and test pools: {sorted(overlap)[:5]}")


class FeatureStore:
    """Lazily extracted local features per (city, grid size); grid size None means BR."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self._cache: dict = {}
        self._extractor = None

    def put(self, city: str, grid_size: Optional[int], sets: Sequence[LocalFeatureSet]) -> None:
        self._cache[(city, grid_size)] = {s.rooftop_id: s for s in sets}

    def _extractor_fn(self):
        if self._extractor is None:
            self._extractor = features.make_extractor(self.config.extractor)
        return self._extractor

    def _images(self, r: RooftopImage, grid_size: Optional[int]) -> list:
        if grid_size is None:
            masked = np.where(r.valid_mask[:, :, None], r.pixels, 0).astype(np.uint8)
            s = self.config.br_size
            return [features.resize_bilinear(masked, s, s)]
        return [t.pixels for t in tiler.tile_or_best(r, grid_size, self.config.min_coverage)]

    def _compute(self, city: CityData, grid_size: Optional[int]) -> dict:
        spec = self.config.extractor
        if spec.kind is ExtractorKind.PRECOMPUTED:
            path = Path(spec.model_path) / features.feature_file_name(city.name, grid_size)
            return {s.rooftop_id: s for s in features.load_features(path)}
        extract = self._extractor_fn()

        def one(r):
            return LocalFeatureSet(r.rooftop_id, city.name, extract(self._images(r, grid_size)), r.label)

        jobs = max(1, self.config.jobs)
        if jobs > 1 and spec.kind is ExtractorKind.BASELINE:
            with ThreadPoolExecutor(jobs) as ex:
                sets = list(ex.map(one, city.rooftops))
        else:
            sets = [one(r) for r in city.rooftops]
        return {s.rooftop_id: s for s in sets}

    def get(self, city: CityData, grid_size: Optional[int]) -> dict:
        key = (city.name, grid_size)
        if key not in self._cache:
            t0 = time.monotonic()
            self._cache[key] = self._compute(city, grid_size)
            log.info("features %s g=%s: %d rooftops in %.1fs", city.name, grid_size,
                     len(self._cache[key]), time.monotonic() - t0)
        return self._cache[key]

    def sets(self, pool: Sequence[tuple], grid_size: Optional[int]) -> list:
        """Feature sets for ``(CityData, RooftopImage)`` pairs, in order."""
        return [self.get(c, grid_size)[r.rooftop_id] for c, r in pool]


# --------------------------------------------------------------------------- registry

@dataclass
class StoredModel:
    combo: HyperparameterCombo
    model: TrainedModel
    quantizer: object = None  # Codebook, GmmModel or None
    grid_position: int = 0
    test_report: Optional[ScoreReport] = None
    validation_report: Optional[ScoreReport] = None
    seconds: float = 0.0

    @property
    def key(self) -> str:
        return self.combo.key()


@dataclass
class PhaseOutcome:
    phase: Phase
    report: ScoreReport
    stopped: bool
    chosen_combo: Optional[HyperparameterCombo] = None
    validation: Optional[ScoreReport] = None
    fits: int = 0
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "phase": self.phase.value,
            "report": self.report.to_dict(),
            "stopped": self.stopped,
            "chosen_combo": self.chosen_combo.to_dict() if self.chosen_combo else None,
            "validation": self.validation.to_dict() if self.validation else None,
            "fits": self.fits,
            "seconds": self.seconds,
        }


@dataclass
class StepRecord:
    index: int
    city: str
    approach: Approach
    cities: list  # all cities in scope at this step, arrival order
    grid: list = field(default_factory=list)  # combos trained here (Phase-3 only)
    models: list = field(default_factory=list)  # StoredModel trained at this step
    model_source: Optional[int] = None  # step index owning the model set in force
    best_key: Optional[str] = None
    best_source: Optional[int] = None  # step index owning the best model
    outcomes: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def dirname(self) -> str:
        return f"{self.index}_{self.city}"


class ModelRegistry:
    """Ordered per-city steps with their trained models; optionally mirrored on disk.

    On-disk layout::

        <root>/<step>_<city>/<approach>/<combo_key>/{model.bin,meta.json,codebook.bin}
        <root>/<step>_<city>/best.json      # {approach: best pointer, outcomes, timings}
    """

    def __init__(self, root=None, approach: Approach = Approach.BRG_VLAD_ML):
        self.root = Path(root) if root else None
        self.approach = Approach(approach)
        self.steps: list = []

    def __len__(self):
        return len(self.steps)

    def models_of(self, step_index: int) -> list:
        return self.steps[step_index].models

    def model_set(self, step: StepRecord) -> list:
        if step.model_source is None:
            return []
        return self.steps[step.model_source].models

    def best(self, step: Optional[StepRecord] = None) -> StoredModel:
        step = step or self.steps[-1]
        if step.best_key is None:
            raise PhaseError(f"step {step.index} has no best model")
        for m in self.steps[step.best_source].models:
            if m.key == step.best_key:
                return m
        raise PhaseError(f"best pointer {step.best_key} not found in step {step.best_source}")

    # -- persistence ------------------------------------------------------

    def save_step(self, step: StepRecord) -> None:
        if self.root is None:
            return
        step_dir = self.root / step.dirname
        step_dir.mkdir(parents=True, exist_ok=True)
        app_dir = step_dir / step.approach.value
        tmp = step_dir / f".tmp_{step.approach.value}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        for m in step.models:
            d = tmp / m.key
            d.mkdir()
            (d / "model.bin").write_bytes(classify.dumps_model(m.model))
            if m.quantizer is not None:
                (d / "codebook.bin").write_bytes(encoding.dumps_quantizer(m.quantizer))
            meta = {
                "combo": m.combo.to_dict(),
                "grid_position": m.grid_position,
                "test": m.test_report.to_dict() if m.test_report else None,
                "validation": m.validation_report.to_dict() if m.validation_report else None,
                "seconds": m.seconds,
            }
            (d / "meta.json").write_text(json.dumps(meta, indent=2))
        if app_dir.exists():
            shutil.rmtree(app_dir)
        os.replace(tmp, app_dir)
        best_path = step_dir / "best.json"
        doc = json.loads(best_path.read_text()) if best_path.exists() else {}
        doc[step.approach.value] = {
            "city": step.city,
            "cities": step.cities,
            "best_key": step.best_key,
            "best_step": self.steps[step.best_source].dirname if step.best_source is not None else None,
            "model_step": self.steps[step.model_source].dirname if step.model_source is not None else None,
            "grid": [c.to_dict() for c in step.grid],
            "outcomes": [o.to_dict() for o in step.outcomes],
            "seconds": step.seconds,
        }
        best_path.write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, root, approach) -> "ModelRegistry":
        approach = Approach(approach)
        reg = cls(root, approach)
        root = Path(root)
        if not root.exists():
            raise PhaseError(f"registry not found: {root}")
        dirs = []
        for d in root.iterdir():
            m = re.match(r"^(\d+)_(.+)$", d.name)
            if d.is_dir() and m and (d / "best.json").exists():
                doc = json.loads((d / "best.json").read_text())
                if approach.value in doc:
                    dirs.append((int(m.group(1)), d, doc[approach.value]))
        dirs.sort(key=lambda t: t[0])
        index_of = {}
        for pos, (idx, d, doc) in enumerate(dirs):
            index_of[d.name] = pos
            step = StepRecord(pos, doc["city"], approach, list(doc["cities"]),
                              grid=[HyperparameterCombo.from_dict(c) for c in doc["grid"]],
                              best_key=doc["best_key"], seconds=doc.get("seconds", 0.0))
            step.outcomes = [_outcome_from_dict(o) for o in doc.get("outcomes", [])]
            app_dir = d / approach.value
            models = []
            if app_dir.exists():
                for md in sorted(app_dir.iterdir()):
                    meta = json.loads((md / "meta.json").read_text())
                    q = None
                    if (md / "codebook.bin").exists():
                        q = encoding.loads_quantizer((md / "codebook.bin").read_bytes())
                    models.append(StoredModel(
                        HyperparameterCombo.from_dict(meta["combo"]),
                        classify.loads_model((md / "model.bin").read_bytes()), q,
                        meta["grid_position"],
                        ScoreReport.from_dict(meta["test"]) if meta.get("test") else None,
                        ScoreReport.from_dict(meta["validation"]) if meta.get("validation") else None,
                        meta.get("seconds", 0.0)))
            models.sort(key=lambda m: m.grid_position)
            step.models = models
            step.best_source = index_of.get(doc["best_step"]) if doc["best_step"] else None
            step.model_source = index_of.get(doc["model_step"]) if doc["model_step"] else None
            reg.steps.append(step)
        return reg


def _outcome_from_dict(d: dict) -> PhaseOutcome:
    return PhaseOutcome(Phase(d["phase"]), ScoreReport.from_dict(d["report"]), d["stopped"],
                        HyperparameterCombo.from_dict(d["chosen_combo"]) if d.get("chosen_combo") else None,
                        ScoreReport.from_dict(d["validation"]) if d.get("validation") else None,
                        d.get("fits", 0), d.get("seconds", 0.0))


# --------------------------------------------------------------------------- encoding + scoring

def encode_sets(approach: Approach, quantizer, sets: Sequence[LocalFeatureSet], normalize: bool = True) -> np.ndarray:
    if approach is Approach.BRG_VLAD_ML:
        rows = [encoding.vlad_encode(quantizer, s, normalize).values for s in sets]
    elif approach is Approach.BRG_FV_ML:
        rows = [encoding.fv_encode(quantizer, s, normalize).values for s in sets]
    else:
        # BR sets hold a single vector, so averaging returns it unchanged
        rows = [encoding.avg_encode(s).values for s in sets]
    return np.vstack(rows) if rows else np.empty((0, 0))


def _pool(cities: Sequence[CityData], split: str) -> list:
    return [(c, r) for c in cities for r in c.split(split)]


class Runner:
    """Executes phases for one approach against a shared feature store."""

    def __init__(self, config: PipelineConfig, store: Optional[FeatureStore] = None):
        self.config = config
        self.store = store or FeatureStore(config)
        self.quantizer_fits = 0

    def dataset(self, pool, combo: HyperparameterCombo, quantizer) -> Dataset2D:
        sets = self.store.sets(pool, combo.grid_size)
        X = encode_sets(self.config.approach, quantizer, sets, self.config.normalize)
        y = [r.label.y for _, r in pool]
        return Dataset2D(X, y, [r.rooftop_id for _, r in pool], [c.name for c, _ in pool])

    def score(self, stored: StoredModel, pool) -> ScoreReport:
        data = self.dataset(pool, stored.combo, stored.quantizer)
        pred, _ = classify.predict(stored.model, data.X)
        return score_predictions(pred, data.y, data.cities, self.config.weight)

    def fit_quantizer(self, train_pool, grid_size, K, cities):
        approach = self.config.approach
        if approach not in (Approach.BRG_VLAD_ML, Approach.BRG_FV_ML):
            return None
        sets = self.store.sets(train_pool, grid_size)
        X = np.vstack([s.vectors for s in sets])
        X = encoding.subsample_pool(X, self.config.pool_cap, self.config.seed)
        prov = {"cities": list(cities), "extractor": self.config.extractor.name, "grid_size": grid_size}
        self.quantizer_fits += 1
        if approach is Approach.BRG_VLAD_ML:
            return encoding.kmeans_fit(X, K, self.config.seed, self.config.kmeans_max_iter,
                                       self.config.kmeans_tol, prov)
        return encoding.gmm_fit(X, K, self.config.seed, self.config.gmm_max_iter, self.config.gmm_tol,
                                self.config.gmm_variance_floor, prov)


def _fits_now() -> int:
    return classify.FIT_CALLS["total"]


def _require_test(cities: Sequence[CityData]):
    for c in cities:
        if not c.split("test"):
            raise PhaseError(f"city {c.name!r} has no test split")


def run_phase1(registry: ModelRegistry, cities: Sequence[CityData], config: PipelineConfig,
               runner: Optional[Runner] = None) -> PhaseOutcome:
    """Score the previous best model on the combined test splits; no training."""
    if not registry.steps:
        raise PhaseError("Phase-1 needs a previous step (the first city goes to Phase-3)")
    _require_test(cities)
    runner = runner or Runner(config)
    t0, f0 = time.monotonic(), _fits_now()
    check_disjoint([r for _, r in _pool(cities, "train")], [r for _, r in _pool(cities, "test")])
    best = registry.best()
    report = runner.score(best, _pool(cities, "test"))
    dt = time.monotonic() - t0
    report.elapsed = dt
    return PhaseOutcome(Phase.P1, report, report.passes(config.threshold), best.combo,
                        fits=_fits_now() - f0, seconds=dt)


def run_phase2(registry: ModelRegistry, cities: Sequence[CityData], config: PipelineConfig,
               runner: Optional[Runner] = None) -> tuple:
    """Re-validate every stored model of the previous step; returns (outcome, chosen model)."""
    if not registry.steps:
        raise PhaseError("Phase-2 needs a previous step")
    stored = registry.model_set(registry.steps[-1])
    if not stored:
        raise PhaseError("previous step stored no models")
    _require_test(cities)
    runner = runner or Runner(config)
    t0, f0 = time.monotonic(), _fits_now()
    val_pool, test_pool = _pool(cities, "train"), _pool(cities, "test")
    check_disjoint([r for _, r in val_pool], [r for _, r in test_pool])
    best, best_val = None, None
    for m in sorted(stored, key=lambda m: m.grid_position):
        rep = runner.score(m, val_pool)
        if best_val is None or rep.weighted_f1 > best_val.weighted_f1:
            best, best_val = m, rep
    report = runner.score(best, test_pool)
    dt = time.monotonic() - t0
    report.elapsed = dt
    out = PhaseOutcome(Phase.P2, report, report.passes(config.threshold), best.combo, best_val,
                       fits=_fits_now() - f0, seconds=dt)
    return out, best


def run_phase3(registry: ModelRegistry, cities: Sequence[CityData], config: PipelineConfig,
               runner: Optional[Runner] = None) -> tuple:
    """Train the whole grid on the combined training splits; returns (outcome, stored models)."""
    runner = runner or Runner(config)
    _require_test(cities)
    t0, f0 = time.monotonic(), _fits_now()
    train_pool, test_pool = _pool(cities, "train"), _pool(cities, "test")
    if not train_pool:
        raise PhaseError("empty training data")
    check_disjoint([r for _, r in train_pool], [r for _, r in test_pool])
    names = [c.name for c in cities]
    grid = config.grid()

    quantizers, train_sets, test_sets = {}, {}, {}
    for combo in grid:
        qk = (combo.grid_size, combo.K)
        if qk in quantizers:
            continue
        quantizers[qk] = runner.fit_quantizer(train_pool, combo.grid_size, combo.K, names)
        train_sets[qk] = runner.dataset(train_pool, combo, quantizers[qk])
        test_sets[qk] = runner.dataset(test_pool, combo, quantizers[qk])

    def train_one(args):
        pos, combo = args
        qk = (combo.grid_size, combo.K)
        s0 = time.monotonic()
        try:
            model = classify.fit(train_sets[qk], combo, config.seed)
        except (classify.ClassifyError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("combo %s failed: %s", combo.label(), exc)
            return None
        te = test_sets[qk]
        pred, _ = classify.predict(model, te.X)
        rep = score_predictions(pred, te.y, te.cities, config.weight)
        return StoredModel(combo, model, quantizers[qk], pos, rep, seconds=time.monotonic() - s0)

    jobs = max(1, config.jobs)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(train_one, enumerate(grid)))
    else:
        results = [train_one(a) for a in enumerate(grid)]
    models = [m for m in results if m is not None]
    if not models:
        raise PhaseError("every combo in the grid failed")
    best = models[0]
    for m in models[1:]:
        if m.test_report.weighted_f1 > best.test_report.weighted_f1:
            best = m
    dt = time.monotonic() - t0
    report = ScoreReport(**{**best.test_report.__dict__, "elapsed": dt})
    out = PhaseOutcome(Phase.P3, report, report.passes(config.threshold), best.combo,
                       fits=_fits_now() - f0, seconds=dt)
    return out, models, best


# --------------------------------------------------------------------------- pipeline

@dataclass
class StepSummary:
    city: str
    cities: list
    outcomes: list
    seconds: float

    @property
    def final(self) -> PhaseOutcome:
        return self.outcomes[-1]

    @property
    def stopped(self) -> bool:
        return self.final.stopped

    def to_dict(self) -> dict:
        return {"city": self.city, "cities": self.cities, "final_phase": self.final.phase.value,
                "weighted_f1": self.final.report.weighted_f1,
                "rounded": self.final.report.rounded_weighted, "stopped": self.stopped,
                "seconds": self.seconds, "phases": [o.to_dict() for o in self.outcomes]}


@dataclass
class PipelineReport:
    approach: Approach
    steps: list

    @property
    def total_seconds(self) -> float:
        return sum(s.seconds for s in self.steps)

    @property
    def total_minutes(self) -> float:
        return round(self.total_seconds / 60.0, 1)

    @property
    def all_passed(self) -> bool:
        return all(s.stopped for s in self.steps)

    def to_dict(self) -> dict:
        return {"approach": self.approach.value, "steps": [s.to_dict() for s in self.steps],
                "total_minutes": self.total_minutes, "all_passed": self.all_passed}

    def scores(self) -> list:
        return [s.final.report.rounded_weighted for s in self.steps]


def run_step(registry: ModelRegistry, cities: Sequence[CityData], config: PipelineConfig,
             runner: Runner) -> StepSummary:
    """One city step: P1 -> P2 -> P3 with early exit; the last city is the new one."""
    new = cities[-1]
    t0 = time.monotonic()
    names = [c.name for c in cities]
    step = StepRecord(len(registry.steps), new.name, config.approach, names)
    outcomes = []
    done = False
    if registry.steps:
        prev = registry.steps[-1]
        o1 = run_phase1(registry, cities, config, runner)
        outcomes.append(o1)
        log.info("%s P1 weighted F1 %.4f (%.2f)", new.name, o1.report.weighted_f1, o1.report.rounded_weighted)
        if o1.stopped:
            step.best_key, step.best_source = prev.best_key, prev.best_source
            step.model_source = prev.model_source
            done = True
        else:
            o2, chosen = run_phase2(registry, cities, config, runner)
            outcomes.append(o2)
            log.info("%s P2 weighted F1 %.4f (%.2f)", new.name, o2.report.weighted_f1, o2.report.rounded_weighted)
            if o2.stopped:
                step.best_key, step.best_source = chosen.key, prev.model_source
                step.model_source = prev.model_source
                done = True
    if not done:
        o3, models, best = run_phase3(registry, cities, config, runner)
        outcomes.append(o3)
        log.info("%s P3 weighted F1 %.4f (%.2f) best %s", new.name, o3.report.weighted_f1,
                 o3.report.rounded_weighted, best.combo.label())
        step.grid = config.grid()
        step.models = models
        step.model_source = step.index
        step.best_key, step.best_source = best.key, step.index
    step.outcomes = outcomes
    step.seconds = time.monotonic() - t0
    registry.steps.append(step)
    registry.save_step(step)
    return StepSummary(new.name, names, outcomes, step.seconds)


def run_pipeline(cities: Sequence[CityData], config: PipelineConfig, registry: Optional[ModelRegistry] = None,
                 store: Optional[FeatureStore] = None) -> PipelineReport:
    """Process cities in arrival order, growing the registry by one step per city."""
    if not cities:
        raise PhaseError("need at least one city")
    registry = registry if registry is not None else ModelRegistry(None, config.approach)
    runner = Runner(config, store)
    steps = []
    for i in range(len(cities)):
        steps.append(run_step(registry, cities[: i + 1], config, runner))
    return PipelineReport(config.approach, steps)


def render_table(reports: Sequence[PipelineReport]) -> str:
    """Rows per approach, one weighted-F1 column per step, plus total minutes."""
    if not reports:
        return ""
    heads = [" + ".join(s.cities) for s in reports[0].steps]
    width = max(12, *(len(h) + 2 for h in heads))
    lines = [f"{'Approach':<14}" + "".join(f"{h:>{width}}" for h in heads) + f"{'Total time (mins.)':>20}"]
    for rep in reports:
        cells = "".join(f"{s.final.report.rounded_weighted:>{width}.2f}" for s in rep.steps)
        lines.append(f"{rep.approach.title:<14}{cells}{rep.total_minutes:>20.1f}")
    return "\n".join(lines)


def comparison_document(reports: Sequence[PipelineReport]) -> dict:
    return {
        "columns": [" + ".join(s.cities) for s in reports[0].steps] if reports else [],
        "rows": [{"approach": r.approach.value, "title": r.approach.title, "weighted_f1": r.scores(),
                  "phases": [s.final.phase.value for s in r.steps], "total_minutes": r.total_minutes}
                 for r in reports],
    }


COMPARISON_SCHEMA = {
    "type": "object",
    "required": ["columns", "rows"],
    "properties": {
        "columns": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["approach", "title", "weighted_f1", "phases", "total_minutes"],
                "properties": {
                    "approach": {"enum": [a.value for a in Approach]},
                    "title": {"type": "string"},
                    "weighted_f1": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "phases": {"type": "array", "items": {"enum": ["P1", "P2", "P3"]}},
                    "total_minutes": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


def compare_approaches(cities: Sequence[CityData], config: PipelineConfig,
                       approaches: Sequence[Approach] = tuple(Approach), registry_root=None) -> list:
    """Run the pipeline once per approach on the same cities; BRG runs share tile features."""
    reports = []
    stores: dict = {}
    for a in approaches:
        a = Approach(a)
        c = PipelineConfig(**{**config.__dict__, "approach": a})
        store = stores.setdefault("br" if a is Approach.BR_ML else "brg", FeatureStore(c))
        store.config = c
        reg = ModelRegistry(registry_root, a)
        reports.append(run_pipeline(cities, c, reg, store))
    return reports
