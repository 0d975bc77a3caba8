"""Flat ``key = value`` configuration files.

Grammar: one assignment per line, ``#`` starts a comment, keys may carry
dotted section prefixes (``grid.sizes = 64,96,128``), list values are comma
separated. Every key is declared once in a schema; the schema also feeds the
CLI ``--help`` text.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s: str):
        return [conv(tok.strip()) for tok in s.split(",") if tok.strip()]
    return parse


def _opt_int(s: str):
    return None if s.strip().lower() in ("none", "null", "") else int(s)


PARSERS: dict = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _bool,
    "ints": _list(int),
    "floats": _list(float),
    "strs": _list(str),
    "opt_ints": _list(_opt_int),
}


@dataclass(frozen=True)
class Key:
    name: str
    kind: str
    default: str
    help: str


PIPELINE_KEYS = [
    Key("approach", "str", "brg-vlad", "br | brg-vlad | brg-fv | brg-avg"),
    Key("seed", "int", "0", "seed for codebooks, forests and random features"),
    Key("threshold", "float", "0.90", "stop once the 2-decimal weighted F1 reaches this"),
    Key("weight", "float", "0.5", "weight of the mean city F1 against the global F1"),
    Key("min_coverage", "float", "0.5", "minimum mask coverage for a grid tile to be kept"),
    Key("data.root", "str", "data", "prepared-dataset root directory"),
    Key("grid.sizes", "ints", "64,96,128", "grid sizes searched in Phase-3 (BRG approaches)"),
    Key("vlad.k", "ints", "2,3,4", "cluster counts searched in Phase-3 (VLAD and FV)"),
    Key("models", "strs", "lr,rf,svc", "classifier families in the grid"),
    Key("lr.c", "floats", "0.01,0.1,1,10", "logistic regression C values"),
    Key("lr.solver", "strs", "liblinear,lbfgs", "logistic regression solvers"),
    Key("rf.n_estimators", "ints", "50,100,200", "random forest sizes"),
    Key("rf.max_depth", "opt_ints", "none,10,20", "random forest depth limits (none = unbounded)"),
    Key("svc.c", "floats", "0.1,1,10", "SVC C values"),
    Key("svc.kernel", "strs", "linear,rbf", "SVC kernels (rbf via random Fourier features)"),
    Key("br.size", "int", "224", "common side length for whole-rooftop (BR) extraction"),
    Key("extractor.kind", "str", "baseline", "baseline | precomputed | external"),
    Key("extractor.model_path", "str", "", "ONNX model file, or directory of feature files"),
    Key("extractor.input_size", "int", "0", "resize images to this side before extraction (0 = native)"),
    Key("extractor.scale", "floats", "0.00392156862745098,0.00392156862745098,0.00392156862745098",
        "per-channel multiplier applied to 0-255 pixels before external inference"),
    Key("extractor.offset", "floats", "0,0,0", "per-channel offset added after scaling"),
    Key("encoding.normalize", "bool", "true", "signed square root + L2 for VLAD and FV"),
    Key("encoding.pool_cap", "int", "100000", "max local vectors used to fit a codebook"),
    Key("kmeans.max_iter", "int", "100", "Lloyd iteration cap"),
    Key("kmeans.tol", "float", "1e-6", "centroid-shift stopping tolerance"),
    Key("gmm.max_iter", "int", "100", "EM iteration cap"),
    Key("gmm.tol", "float", "1e-6", "log-likelihood gain stopping tolerance"),
    Key("gmm.variance_floor", "float", "1e-6", "variance floor relative to mean data variance"),
    Key("jobs", "int", "0", "worker threads (0 = available parallelism)"),
]

SYNTH_KEYS = [
    Key("cities", "strs", "rcp,chakan,pune", "city names; each may override <city>.<field>"),
    Key("seed", "int", "7", "base seed; city i uses seed + i unless <city>.seed is set"),
    Key("scale", "float", "0.2", "fraction of the reference rooftop counts for the default cities"),
    Key("balance", "bool", "true", "augment the minority class of each training split"),
]

CITY_FIELDS = ("n_with_pv", "n_no_pv", "roof_hue_range", "roof_sat_range", "roof_value_range",
               "roof_texture_scale", "roof_size_range", "pv_panel_count_range", "pv_cell_grid",
               "pv_hue", "clutter_count_range", "noise_sigma", "seed")


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _dynamic_key_ok(key: str, cities) -> bool:
    head, _, tail = key.partition(".")
    return head in cities and tail in CITY_FIELDS


def resolve(keys, file_values: Optional[Mapping[str, str]] = None,
            overrides: Optional[Mapping[str, str]] = None, allow_city_keys: bool = False) -> dict:
    """Merge defaults < file < overrides and convert each value by its declared kind."""
    table = {k.name: k for k in keys}
    merged = {k.name: k.default for k in keys}
    for layer in (file_values or {}), (overrides or {}):
        merged.update({k: str(v) for k, v in layer.items()})
    cities = PARSERS["strs"](merged["cities"]) if allow_city_keys else ()
    out = {}
    for key, raw in merged.items():
        if key in table:
            try:
                out[key] = PARSERS[table[key].kind](raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif allow_city_keys and _dynamic_key_ok(key, cities):
            out[key] = raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return out


def load(path, keys, overrides=None, allow_city_keys: bool = False) -> dict:
    file_values = parse_text(Path(path).read_text(), str(path)) if path else {}
    return resolve(keys, file_values, overrides, allow_city_keys)


def describe(keys) -> str:
    width = max(len(k.name) for k in keys)
    return "\n".join(f"  {k.name:<{width}}  {k.help} (default: {k.default})" for k in keys)
