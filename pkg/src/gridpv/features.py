"""Local feature extraction and the on-disk feature file.

Three extractor kinds share one contract, "one vector per image":

* ``baseline``: a 22-dim colour/texture descriptor computed in numpy;
* ``precomputed``: vectors read back from feature files;
* ``external``: an ONNX model run through onnxruntime. A single
  ``InferenceSession`` is shared by all workers; onnxruntime documents
  ``InferenceSession.run`` as safe for concurrent calls.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geodata import Label

BASELINE_DIM = 22
FEATURE_FORMAT = "gridpv-features"


class FeatureError(ValueError):
    pass


class FeatureFormatError(FeatureError):
    pass


class ExtractorKind(str, enum.Enum):
    BASELINE = "baseline"
    PRECOMPUTED = "precomputed"
    EXTERNAL = "external"


@dataclass
class ExtractorSpec:
    kind: ExtractorKind = ExtractorKind.BASELINE
    input_size: Optional[int] = None  # None: extract at native tile size
    model_path: Optional[str] = None  # ONNX file, or directory of feature files
    scale: tuple = (1 / 255, 1 / 255, 1 / 255)
    offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.kind = ExtractorKind(self.kind)
        if self.kind is not ExtractorKind.BASELINE and not self.model_path:
            raise FeatureError(f"{self.kind.value} extractor needs model_path")

    @property
    def name(self) -> str:
        if self.kind is ExtractorKind.BASELINE:
            return "baseline"
        return f"{self.kind.value}:{Path(self.model_path).name}"


@dataclass
class LocalFeatureSet:
    rooftop_id: str
    city_id: str
    vectors: np.ndarray  # (n, D)
    label: Optional[Label] = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.shape[0] < 1:
            raise FeatureError(f"rooftop {self.rooftop_id!r}: empty feature set")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


# --------------------------------------------------------------------------- resizing

def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    return i0, i1, t


def resize_bilinear(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre alignment, rounded back to uint8."""
    if out_w < 1 or out_h < 1 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image and target dimensions must be >= 1")
    if image.shape[0] == out_h and image.shape[1] == out_w:
        return image.copy()
    img = image.astype(np.float64)
    r0, r1, tr = _axis_weights(img.shape[0], out_h)
    c0, c1, tc = _axis_weights(img.shape[1], out_w)
    extra = (None,) * (img.ndim - 2)
    rows = img[r0] * (1 - tr)[(slice(None), None) + extra] + img[r1] * tr[(slice(None), None) + extra]
    out = rows[:, c0] * (1 - tc)[(None, slice(None)) + extra] + rows[:, c1] * tc[(None, slice(None)) + extra]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------- baseline

def _luminance(x: np.ndarray) -> np.ndarray:
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def orientation_histogram(lum: np.ndarray, bins: int = 8) -> np.ndarray:
    """Magnitude-weighted histogram of gradient orientation over [0, pi)."""
    hist = np.zeros(bins)
    if lum.shape[0] < 3 or lum.shape[1] < 3:
        return hist
    gx = (lum[1:-1, 2:] - lum[1:-1, :-2]) / 2
    gy = (lum[2:, 1:-1] - lum[:-2, 1:-1]) / 2
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    idx = np.minimum((theta * (bins / np.pi)).astype(np.intp), bins - 1)
    hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=bins)
    total = hist.sum()
    return hist / total if total > 0 else hist


def extract_baseline(tile: np.ndarray) -> np.ndarray:
    """22-dim descriptor: channel means, channel stds, orientation and intensity histograms."""
    x = np.asarray(tile, dtype=np.float64) / 255.0
    flat = x.reshape(-1, 3)
    means = flat.mean(axis=0)
    stds = flat.std(axis=0)
    lum = _luminance(x)
    orient = orientation_histogram(lum)
    ib = np.minimum((lum * 8).astype(np.intp), 7)
    inten = np.bincount(ib.ravel(), minlength=8).astype(np.float64)
    inten /= inten.sum()
    return np.concatenate([means, stds, orient, inten])


# --------------------------------------------------------------------------- extractors

class BaselineExtractor:
    def __init__(self, spec: Optional[ExtractorSpec] = None):
        self.spec = spec or ExtractorSpec()
        self.dim = BASELINE_DIM

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        size = self.spec.input_size
        out = np.empty((len(images), BASELINE_DIM))
        for i, im in enumerate(images):
            if size and im.shape[:2] != (size, size):
                im = resize_bilinear(im, size, size)
            out[i] = extract_baseline(im)
        return out


class ExternalExtractor:
    """Runs an ONNX model with one image input and one output per image."""

    def __init__(self, spec: ExtractorSpec):
        if spec.kind is not ExtractorKind.EXTERNAL:
            raise FeatureError("ExternalExtractor needs an external ExtractorSpec")
        try:
            import onnxruntime as ort
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise FeatureError("onnxruntime is required for external extractors") from exc
        path = Path(spec.model_path)
        if not path.exists():
            raise FeatureError(f"model load failure: {path} not found")
        try:
            self.session = ort.InferenceSession(str(path), providers=["CPUExecutionProvider"])
        except Exception as exc:
            raise FeatureError(f"model load failure: {exc}") from exc
        inp = self.session.get_inputs()[0]
        self.input_name = inp.name
        shape = list(inp.shape)
        self.channels_first = not (len(shape) == 4 and shape[3] == 3 and shape[1] != 3)
        size = spec.input_size
        if size is None and len(shape) == 4:
            dims = shape[2:4] if self.channels_first else shape[1:3]
            if all(isinstance(d, int) for d in dims):
                size = int(dims[0])
        self.size = size
        self.spec = spec
        self.dim: Optional[int] = None

    def _prepare(self, im: np.ndarray) -> np.ndarray:
        if self.size and im.shape[:2] != (self.size, self.size):
            im = resize_bilinear(im, self.size, self.size)
        x = im.astype(np.float32) * np.asarray(self.spec.scale, np.float32) + np.asarray(self.spec.offset, np.float32)
        if self.channels_first:
            x = x.transpose(2, 0, 1)
        return x[None]

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        rows = []
        for im in images:
            out = np.asarray(self.session.run(None, {self.input_name: self._prepare(im)})[0])
            if out.ndim == 4:
                out = out.mean(axis=(2, 3) if self.channels_first else (1, 2))
            vec = out.reshape(-1).astype(np.float64)
            if self.dim is None:
                self.dim = vec.size
            elif vec.size != self.dim:
                raise FeatureError(f"model output dimension {vec.size} != established {self.dim}")
            rows.append(vec)
        if not rows:
            return np.empty((0, self.dim or 0))
        return np.vstack(rows)


def extract_external(tiles: Sequence[np.ndarray], spec: ExtractorSpec) -> list:
    return list(ExternalExtractor(spec)(tiles))


def make_extractor(spec: ExtractorSpec):
    if spec.kind is ExtractorKind.BASELINE:
        return BaselineExtractor(spec)
    if spec.kind is ExtractorKind.EXTERNAL:
        return ExternalExtractor(spec)
    raise FeatureError("precomputed features are loaded from files, not extracted")


# --------------------------------------------------------------------------- feature files

def dumps_features(sets: Sequence[LocalFeatureSet], city: Optional[str] = None,
                   extractor: str = "baseline") -> bytes:
    dims = {s.dim for s in sets}
    if len(dims) > 1:
        raise FeatureError(f"mixed feature dimensions {sorted(dims)}")
    dim = dims.pop() if dims else 0
    if city is None:
        city = sets[0].city_id if sets else ""
    header = {
        "version": 1,
        "format": FEATURE_FORMAT,
        "city": city,
        "extractor": extractor,
        "dim": dim,
        "rooftops": [{"id": s.rooftop_id, "label": s.label.value if s.label else None,
                      "count": int(s.vectors.shape[0])} for s in sets],
    }
    payload = b"".join(np.ascontiguousarray(s.vectors, dtype="<f4").tobytes() for s in sets)
    return json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n" + payload


def loads_features(blob: bytes) -> list:
    nl = blob.find(b"\n")
    if nl < 0 or not blob.startswith(b'{"version"'):
        raise FeatureFormatError("not a feature file (bad magic)")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FeatureFormatError(f"unreadable header: {exc}") from exc
    if header.get("version") != 1 or header.get("format") != FEATURE_FORMAT:
        raise FeatureFormatError("header/version mismatch")
    dim = int(header["dim"])
    payload = blob[nl + 1:]
    expected = sum(int(r["count"]) for r in header["rooftops"]) * dim * 4
    if len(payload) < expected:
        raise FeatureFormatError("truncated payload")
    if len(payload) != expected:
        raise FeatureFormatError("index inconsistent with payload length")
    data = np.frombuffer(payload, dtype="<f4")
    out = []
    pos = 0
    for r in header["rooftops"]:
        n = int(r["count"]) * dim
        vecs = data[pos:pos + n].reshape(-1, dim)
        pos += n
        lab = Label(r["label"]) if r.get("label") else None
        fs = LocalFeatureSet.__new__(LocalFeatureSet)
        fs.rooftop_id, fs.city_id, fs.label = r["id"], header["city"], lab
        fs.vectors = vecs.astype(np.float64)
        out.append(fs)
    return out


def save_features(sets: Sequence[LocalFeatureSet], path, city: Optional[str] = None,
                  extractor: str = "baseline") -> None:
    Path(path).write_bytes(dumps_features(sets, city, extractor))


def load_features(path) -> list:
    return loads_features(Path(path).read_bytes())


def feature_file_name(city: str, grid_size: Optional[int]) -> str:
    """Name looked up in a precomputed-features directory."""
    return f"{city}.br.feat" if grid_size is None else f"{city}.g{grid_size}.feat"
