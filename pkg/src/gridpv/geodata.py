"""Georeferenced rasters, building footprints and per-rooftop clipping.

World and footprint coordinates are assumed to share one planar CRS; the raster
is georeferenced only through a 6-coefficient affine read from a world file.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

WORLD_FILE_SUFFIXES = (".pgw", ".pngw", ".wld")


class GeoDataError(ValueError):
    pass


class Label(str, enum.Enum):
    WITH_PV = "with_pv"
    NO_PV = "no_pv"

    @property
    def y(self) -> int:
        return 1 if self is Label.WITH_PV else 0


@dataclass
class GeoRaster:
    pixels: np.ndarray  # (H, W, 3) uint8
    transform: tuple  # (A, B, C, D, E, F): x = A*col + B*row + C, y = D*col + E*row + F

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise GeoDataError("raster pixels must be an (H, W, 3) uint8 array")
        if self.height <= 0 or self.width <= 0:
            raise GeoDataError("raster must be non-empty")
        a, b, _, d, e, _ = self.transform
        if a * e - b * d == 0:
            raise GeoDataError("geotransform is not invertible")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def world_to_pixel(self, x, y):
        """Map world coordinates to continuous (col, row) pixel coordinates."""
        a, b, c, d, e, f = self.transform
        det = a * e - b * d
        dx = np.asarray(x, dtype=np.float64) - c
        dy = np.asarray(y, dtype=np.float64) - f
        col = (e * dx - b * dy) / det
        row = (-d * dx + a * dy) / det
        return col, row


@dataclass
class Footprint:
    rooftop_id: str
    rings: list  # list of (n, 2) float arrays, closed (first == last)


@dataclass
class FootprintSet:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self, rooftop_id: str) -> Footprint:
        for e in self.entries:
            if e.rooftop_id == rooftop_id:
                return e
        raise KeyError(rooftop_id)


@dataclass
class RooftopImage:
    rooftop_id: str
    city_id: str
    pixels: np.ndarray  # (h, w, 3) uint8
    valid_mask: np.ndarray  # (h, w) bool
    label: Optional[Label] = None
    split: Optional[str] = None
    origin: tuple = (0, 0)  # (row, col) of the crop in the source raster

    def __post_init__(self):
        if self.pixels.shape[:2] != self.valid_mask.shape:
            raise GeoDataError("pixel and mask dimensions differ")
        if not self.valid_mask.any():
            raise GeoDataError(f"rooftop {self.rooftop_id!r}: empty mask")

    @property
    def shape(self) -> tuple:
        return self.valid_mask.shape


# --------------------------------------------------------------------------- rasters

def parse_world_file(text: str) -> tuple:
    try:
        vals = [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise GeoDataError(f"unparseable world file: {exc}") from exc
    if len(vals) != 6:
        raise GeoDataError(f"world file must hold 6 numbers, found {len(vals)}")
    a, d, b, e, c, f = vals
    return (a, b, c, d, e, f)


def format_world_file(transform: Sequence[float]) -> str:
    a, b, c, d, e, f = transform
    return "\n".join(repr(float(v)) for v in (a, d, b, e, c, f)) + "\n"


def _find_world_file(path: Path) -> Optional[Path]:
    for suffix in WORLD_FILE_SUFFIXES:
        cand = path.with_suffix(suffix)
        if cand.exists():
            return cand
    return None


def load_raster(path, world_file=None) -> GeoRaster:
    """Read an 8-bit 1- or 3-channel PNG and its affine geotransform.

    The transform comes from ``world_file`` if given, else a sidecar next to the
    image (``.pgw``, ``.pngw``, ``.wld``), else a ``world_file`` PNG text chunk.
    Grayscale images are replicated to three channels.
    """
    path = Path(path)
    if not path.exists():
        raise GeoDataError(f"raster not found: {path}")
    with Image.open(path) as im:
        mode = im.mode
        embedded = im.info.get("world_file")
        if mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        elif mode == "RGB":
            arr = np.asarray(im, dtype=np.uint8)
        elif mode in ("I", "I;16", "I;16B", "F", "1"):
            raise GeoDataError(f"unsupported bit depth (mode {mode})")
        else:
            raise GeoDataError(f"unsupported channel layout (mode {mode})")
    wf = Path(world_file) if world_file is not None else _find_world_file(path)
    if wf is not None:
        transform = parse_world_file(wf.read_text())
    elif embedded:
        transform = parse_world_file(embedded)
    else:
        raise GeoDataError(f"missing geotransform for {path}")
    return GeoRaster(np.ascontiguousarray(arr), transform)


def save_raster(raster: GeoRaster, path) -> None:
    path = Path(path)
    Image.fromarray(raster.pixels, mode="RGB").save(path)
    path.with_suffix(".pgw").write_text(format_world_file(raster.transform))


# --------------------------------------------------------------------------- footprints

def _orient(p, q, r) -> float:
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def _on_segment(p, q, r) -> bool:
    return (min(p[0], r[0]) <= q[0] <= max(p[0], r[0])
            and min(p[1], r[1]) <= q[1] <= max(p[1], r[1]))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _orient(p3, p4, p1)
    d2 = _orient(p3, p4, p2)
    d3 = _orient(p1, p2, p3)
    d4 = _orient(p1, p2, p4)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True
    if d1 == 0 and _on_segment(p3, p1, p4):
        return True
    if d2 == 0 and _on_segment(p3, p2, p4):
        return True
    if d3 == 0 and _on_segment(p1, p3, p2):
        return True
    if d4 == 0 and _on_segment(p1, p4, p2):
        return True
    return False


def ring_is_simple(ring: np.ndarray) -> bool:
    """Pairwise check of non-adjacent edges of a closed ring."""
    n = len(ring) - 1  # edge count
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]):
                return False
    return True


def _check_ring(coords, fid) -> np.ndarray:
    ring = np.asarray(coords, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] < 2:
        raise GeoDataError(f"feature {fid!r}: malformed ring")
    ring = ring[:, :2]
    if len(ring) < 4:
        raise GeoDataError(f"feature {fid!r}: ring needs at least 4 vertices")
    if not np.array_equal(ring[0], ring[-1]):
        raise GeoDataError(f"feature {fid!r}: unclosed ring")
    if not ring_is_simple(ring):
        raise GeoDataError(f"feature {fid!r}: self-intersecting ring")
    return ring


def parse_footprints(doc: dict) -> FootprintSet:
    if doc.get("type") != "FeatureCollection":
        raise GeoDataError("footprints must be a GeoJSON FeatureCollection")
    out = FootprintSet()
    seen = set()

    def add(fid, polygon_coords):
        if fid in seen:
            raise GeoDataError(f"duplicate rooftop id {fid!r}")
        seen.add(fid)
        out.entries.append(Footprint(fid, [_check_ring(r, fid) for r in polygon_coords]))

    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        fid = props.get("rooftop_id", feat.get("id"))
        if fid is None:
            raise GeoDataError("feature without id")
        fid = str(fid)
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            add(fid, geom["coordinates"])
        elif gtype == "MultiPolygon":
            for i, part in enumerate(geom["coordinates"]):
                add(f"{fid}#{i}", part)
        else:
            raise GeoDataError(f"feature {fid!r}: unsupported geometry type {gtype!r}")
    return out


def load_footprints(path) -> FootprintSet:
    path = Path(path)
    if not path.exists():
        raise GeoDataError(f"footprints not found: {path}")
    return parse_footprints(json.loads(path.read_text()))


def footprints_to_geojson(footprints: Iterable[Footprint]) -> dict:
    feats = []
    for fp in footprints:
        feats.append({
            "type": "Feature",
            "properties": {"rooftop_id": fp.rooftop_id},
            "geometry": {"type": "Polygon",
                         "coordinates": [np.asarray(r).tolist() for r in fp.rings]},
        })
    return {"type": "FeatureCollection", "features": feats}


# --------------------------------------------------------------------------- clipping

def points_in_polygon(xs, ys, rings) -> np.ndarray:
    """Even-odd test over all rings; points lying on an edge count as inside."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    on_edge = np.zeros_like(inside)
    for ring in rings:
        ring = np.asarray(ring, dtype=np.float64)
        for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
            crosses = (y1 > ys) != (y2 > ys)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (xs < x_at)
            cross = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
            on_edge |= ((cross == 0)
                        & (xs >= min(x1, x2)) & (xs <= max(x1, x2))
                        & (ys >= min(y1, y2)) & (ys <= max(y1, y2)))
    return inside | on_edge


def clip_rooftop(raster: GeoRaster, footprint: Footprint, city_id: str = "",
                 label: Optional[Label] = None) -> RooftopImage:
    """Crop the footprint's pixel bounding box and mask pixels whose centre is inside."""
    px_rings = []
    for ring in footprint.rings:
        col, row = raster.world_to_pixel(ring[:, 0], ring[:, 1])
        px_rings.append(np.column_stack([col, row]))
    allpts = np.vstack(px_rings)
    c0 = int(np.floor(allpts[:, 0].min()))
    c1 = int(np.ceil(allpts[:, 0].max()))
    r0 = int(np.floor(allpts[:, 1].min()))
    r1 = int(np.ceil(allpts[:, 1].max()))
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, raster.width), min(r1, raster.height)
    if c1 <= c0 or r1 <= r0:
        raise GeoDataError(f"rooftop {footprint.rooftop_id!r}: polygon outside raster")
    cols = np.arange(c0, c1) + 0.5
    rows = np.arange(r0, r1) + 0.5
    cc, rr = np.meshgrid(cols, rows)
    mask = points_in_polygon(cc, rr, px_rings)
    if not mask.any():
        raise GeoDataError(f"rooftop {footprint.rooftop_id!r}: empty mask")
    pixels = raster.pixels[r0:r1, c0:c1].copy()
    return RooftopImage(footprint.rooftop_id, city_id, pixels, mask, label, origin=(r0, c0))


# --------------------------------------------------------------------------- prepared layout

def write_prepared(root, city: str, rooftops: Sequence[RooftopImage]) -> Path:
    """Write ``<root>/<city>/{images,masks}/<id>.png`` plus labels.csv and splits.csv."""
    base = Path(root) / city
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)
    for r in rooftops:
        Image.fromarray(r.pixels, mode="RGB").save(base / "images" / f"{r.rooftop_id}.png")
        Image.fromarray(r.valid_mask.astype(np.uint8) * 255, mode="L").save(
            base / "masks" / f"{r.rooftop_id}.png")
    with open(base / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rooftop_id", "label"])
        for r in rooftops:
            w.writerow([r.rooftop_id, r.label.value if r.label else ""])
    with open(base / "splits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rooftop_id", "split"])
        for r in rooftops:
            w.writerow([r.rooftop_id, r.split or ""])
    return base


def _read_csv_map(path: Path, key: str, value: str) -> dict:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != [key, value]:
            raise GeoDataError(f"{path}: expected header {key},{value}")
        return {row[key]: row[value] for row in reader}


def load_city(root, city: str) -> list:
    """Load every rooftop of a prepared city directory, in labels.csv order."""
    base = Path(root) / city
    if not (base / "labels.csv").exists():
        raise GeoDataError(f"no prepared dataset for city {city!r} under {root}")
    labels = _read_csv_map(base / "labels.csv", "rooftop_id", "label")
    splits = {}
    if (base / "splits.csv").exists():
        splits = _read_csv_map(base / "splits.csv", "rooftop_id", "split")
    out = []
    for rid, lab in labels.items():
        with Image.open(base / "images" / f"{rid}.png") as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
        with Image.open(base / "masks" / f"{rid}.png") as im:
            mk = np.asarray(im.convert("L")) >= 128
        out.append(RooftopImage(rid, city, px, mk, Label(lab) if lab else None,
                                splits.get(rid) or None))
    return out


def stratified_split(ids: Sequence[str], labels: Sequence[Label], train_fraction: float,
                     seed: int) -> dict:
    """Seeded per-class split; returns rooftop_id -> 'train' | 'test'."""
    rng = np.random.default_rng(seed)
    out = {}
    for lab in (Label.WITH_PV, Label.NO_PV):
        members = [i for i, l in zip(ids, labels) if l == lab]
        order = rng.permutation(len(members))
        n_train = int(round(train_fraction * len(members)))
        for rank, idx in enumerate(order):
            out[members[idx]] = "train" if rank < n_train else "test"
    return out
