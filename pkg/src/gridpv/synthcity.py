"""Seeded synthetic cities and the augmentation suite used for class balancing.

A city is rendered as one georeferenced scene (PNG + world file) with a
GeoJSON of rooftop footprints, then clipped into the prepared-dataset layout
through :mod:`gridpv.geodata`, so generated data exercises the same ingest
path as real imagery.

Panels are drawn as dark, homogeneous rectangles crossed by a lighter cell
grid. No-PV roofs carry dark clutter (water tanks, shadow patches) so that
darkness alone does not identify a panel.
"""

from __future__ import annotations

import colorsys
import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import geodata
from .geodata import Footprint, GeoRaster, Label, RooftopImage

log = logging.getLogger(__name__)

PIXEL_SIZE = 0.5
MARGIN = 12
TRAIN_FRACTION = 0.7


# --------------------------------------------------------------------------- specs

@dataclass
class CitySpec:
    name: str
    n_with_pv: int = 10
    n_no_pv: int = 10
    roof_hue_range: tuple = (0.0, 360.0)  # degrees
    roof_sat_range: tuple = (0.05, 0.25)
    roof_value_range: tuple = (0.55, 0.85)
    roof_texture_scale: float = 24.0  # pixels per texture cell
    roof_size_range: tuple = (150, 250)
    pv_panel_count_range: tuple = (1, 3)
    pv_cell_grid: int = 10  # cell pitch in pixels
    pv_hue: float = 225.0
    clutter_count_range: tuple = (0, 3)
    noise_sigma: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_with_pv < 0 or self.n_no_pv < 0:
            raise ValueError("counts must be >= 0")
        for name in ("roof_hue_range", "roof_sat_range", "roof_value_range", "roof_size_range",
                     "pv_panel_count_range", "clutter_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range")
        if self.pv_panel_count_range[0] < 1:
            raise ValueError("with_pv rooftops need at least one panel")
        if self.pv_cell_grid < 3:
            raise ValueError("pv_cell_grid must be >= 3 pixels")


# Reference class counts per city (full survey size divided by five).
REFERENCE_COUNTS = {"rcp": (42, 507), "chakan": (73, 98), "pune": (195, 195)}


def benchmark_specs(seed: int = 7, scale: float = 1 / 5) -> list:
    """Three cities with the reference class ratios and distinct roof styles."""
    def n(v):
        return int(math.floor(v * scale + 0.5))

    return [
        CitySpec("rcp", n(42), n(507), roof_hue_range=(0, 40), roof_sat_range=(0.0, 0.12),
                 roof_value_range=(0.68, 0.88), roof_texture_scale=28, pv_panel_count_range=(1, 3),
                 pv_cell_grid=10, pv_hue=222, clutter_count_range=(0, 2), noise_sigma=3.0, seed=seed),
        CitySpec("chakan", n(73), n(98), roof_hue_range=(5, 30), roof_sat_range=(0.35, 0.6),
                 roof_value_range=(0.35, 0.55), roof_texture_scale=14, pv_panel_count_range=(1, 4),
                 pv_cell_grid=13, pv_hue=205, clutter_count_range=(2, 5), noise_sigma=6.0,
                 seed=seed + 1),
        CitySpec("pune", n(195), n(195), roof_hue_range=(0, 360), roof_sat_range=(0.05, 0.45),
                 roof_value_range=(0.4, 0.85), roof_texture_scale=20, pv_panel_count_range=(1, 4),
                 pv_cell_grid=8, pv_hue=235, clutter_count_range=(1, 4), noise_sigma=5.0,
                 seed=seed + 2),
    ]


# --------------------------------------------------------------------------- rendering

def _hsv(h_deg: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((h_deg % 360) / 360.0, s, v)) * 255.0


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: float) -> np.ndarray:
    """Bilinearly upsampled uniform noise in [-1, 1]."""
    gh, gw = max(2, int(h / cell) + 2), max(2, int(w / cell) + 2)
    grid = rng.uniform(-1, 1, size=(gh, gw))
    ys = np.linspace(0, gh - 1.001, h)
    xs = np.linspace(0, gw - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    ty, tx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def _roof_polygon(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Rectangle or L-shape in local pixel coordinates, offset by MARGIN."""
    m = MARGIN
    if rng.random() < 0.3:
        cw = int(rng.integers(w // 4, w // 2))
        ch = int(rng.integers(h // 4, h // 2))
        pts = [(0, 0), (w, 0), (w, h - ch), (w - cw, h - ch), (w - cw, h), (0, h), (0, 0)]
    else:
        pts = [(0, 0), (w, 0), (w, h), (0, h), (0, 0)]
    return np.array([(x + m, y + m) for x, y in pts], dtype=np.float64)


@dataclass
class RenderedRoof:
    image: np.ndarray  # (H, W, 3) uint8, roof plus MARGIN of ground on every side
    polygon: np.ndarray  # closed ring in local pixel coordinates
    mask: np.ndarray
    panels: list = field(default_factory=list)  # (r0, c0, r1, c1) half-open rects


def render_rooftop(spec: CitySpec, index: int, with_pv: bool) -> RenderedRoof:
    """Render one rooftop; roof, panels and noise draw from independent streams.

    Rendering the same (spec, index) with and without panels therefore differs
    only inside the returned panel rectangles.
    """
    ss = np.random.SeedSequence([spec.seed, index])
    roof_rng, panel_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    lo, hi = spec.roof_size_range
    w = int(roof_rng.integers(lo, hi + 1))
    h = int(roof_rng.integers(lo, hi + 1))
    H, W = h + 2 * MARGIN, w + 2 * MARGIN
    poly = _roof_polygon(roof_rng, w, h)
    rr, cc = np.mgrid[0:H, 0:W]
    mask = geodata.points_in_polygon(cc + 0.5, rr + 0.5, [poly])

    ground = _hsv(roof_rng.uniform(70, 110), 0.35, 0.45)
    img = np.empty((H, W, 3))
    img[:] = ground
    img += 18 * _smooth_noise(roof_rng, H, W, 6)[:, :, None]

    base = _hsv(roof_rng.uniform(*spec.roof_hue_range), roof_rng.uniform(*spec.roof_sat_range),
                roof_rng.uniform(*spec.roof_value_range))
    tex = _smooth_noise(roof_rng, H, W, spec.roof_texture_scale)
    roof = base[None, None, :] * (1 + 0.12 * tex[:, :, None])
    # ridge line
    if roof_rng.random() < 0.6:
        r = MARGIN + int(roof_rng.integers(h // 3, 2 * h // 3))
        roof[r:r + 2] *= 0.8
    # dark clutter: tanks and shadow patches
    for _ in range(int(roof_rng.integers(spec.clutter_count_range[0], spec.clutter_count_range[1] + 1))):
        dark = _hsv(roof_rng.uniform(0, 360), roof_rng.uniform(0, 0.3), roof_rng.uniform(0.08, 0.25))
        cy = MARGIN + roof_rng.uniform(0.15, 0.85) * h
        cx = MARGIN + roof_rng.uniform(0.15, 0.85) * w
        if roof_rng.random() < 0.5:
            rad = roof_rng.uniform(6, 14)
            sel = (rr + 0.5 - cy) ** 2 + (cc + 0.5 - cx) ** 2 <= rad * rad
        else:
            hh, hw = roof_rng.uniform(8, 30), roof_rng.uniform(8, 30)
            sel = (np.abs(rr + 0.5 - cy) <= hh) & (np.abs(cc + 0.5 - cx) <= hw)
        roof[sel] = dark
    img[mask] = roof[mask]

    panels = []
    if with_pv:
        n_panels = int(panel_rng.integers(spec.pv_panel_count_range[0], spec.pv_panel_count_range[1] + 1))
        pitch = spec.pv_cell_grid
        cell_color = _hsv(spec.pv_hue + panel_rng.uniform(-10, 10), panel_rng.uniform(0.5, 0.75),
                          panel_rng.uniform(0.28, 0.42))
        line_color = _hsv(0, 0, panel_rng.uniform(0.65, 0.8))
        attempts = 0
        while len(panels) < n_panels and attempts < 400:
            attempts += 1
            nr = int(panel_rng.integers(3, 7))
            nc = int(panel_rng.integers(3, 8))
            if panel_rng.random() < 0.5:
                nr, nc = nc, nr
            ph, pw = nr * pitch + 1, nc * pitch + 1
            if ph >= h - 4 or pw >= w - 4:
                continue
            r0 = int(panel_rng.integers(MARGIN + 2, MARGIN + h - ph - 1))
            c0 = int(panel_rng.integers(MARGIN + 2, MARGIN + w - pw - 1))
            if not mask[r0:r0 + ph, c0:c0 + pw].all():
                continue
            if any(r0 < q[2] and q[0] < r0 + ph and c0 < q[3] and q[1] < c0 + pw for q in panels):
                continue
            block = np.empty((ph, pw, 3))
            block[:] = cell_color
            block[::pitch, :] = line_color
            block[:, ::pitch] = line_color
            img[r0:r0 + ph, c0:c0 + pw] = block
            panels.append((r0, c0, r0 + ph, c0 + pw))
        if not panels:
            raise RuntimeError(f"could not place a panel on rooftop {index} of {spec.name}")

    img += noise_rng.normal(0, spec.noise_sigma, size=img.shape)
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return RenderedRoof(out, poly, mask, panels)


# --------------------------------------------------------------------------- cities

def _city_offset(name: str) -> tuple:
    k = sum(ord(ch) for ch in name) % 97
    return 400_000.0 + 10_000.0 * k, 2_000_000.0 + 5_000.0 * k


def render_scene(spec: CitySpec):
    """Compose every rooftop of a city into one raster with world-coordinate footprints."""
    labels = [Label.WITH_PV] * spec.n_with_pv + [Label.NO_PV] * spec.n_no_pv
    order = np.random.default_rng(spec.seed).permutation(len(labels))
    roofs = []
    for i, li in enumerate(order):
        lab = labels[li]
        roofs.append((f"{spec.name}_{i:04d}", lab, render_rooftop(spec, i, lab is Label.WITH_PV)))
    n = len(roofs)
    cols = max(1, int(math.ceil(math.sqrt(n))))
    rows = max(1, int(math.ceil(n / cols)))
    cell = spec.roof_size_range[1] + 2 * MARGIN
    scene = np.empty((rows * cell, cols * cell, 3), dtype=np.uint8)
    scene[:] = np.clip(_hsv(90, 0.3, 0.4), 0, 255).astype(np.uint8)
    x0, y0 = _city_offset(spec.name)
    transform = (PIXEL_SIZE, 0.0, x0, 0.0, -PIXEL_SIZE, y0)
    footprints = []
    for k, (rid, lab, roof) in enumerate(roofs):
        r, c = divmod(k, cols)
        top, left = r * cell, c * cell
        hh, ww = roof.image.shape[:2]
        scene[top:top + hh, left:left + ww] = roof.image
        ring = roof.polygon + np.array([left, top])
        world = np.column_stack([x0 + PIXEL_SIZE * ring[:, 0], y0 - PIXEL_SIZE * ring[:, 1]])
        footprints.append(Footprint(rid, [world]))
    return GeoRaster(scene, transform), footprints, {rid: lab for rid, lab, _ in roofs}


def generate_city(spec: CitySpec, out_root, balance: bool = False, raw_root=None) -> Path:
    """Render, clip and write one city in the prepared layout; returns the city directory.

    The scene raster, world file and footprints go to ``raw_root/<city>/``
    (default ``<out_root>/_raw/<city>/``).
    """
    out_root = Path(out_root)
    raster, footprints, labels = render_scene(spec)
    raw = Path(raw_root) / spec.name if raw_root else out_root / "_raw" / spec.name
    raw.mkdir(parents=True, exist_ok=True)
    geodata.save_raster(raster, raw / "scene.png")
    (raw / "footprints.geojson").write_text(
        json.dumps(geodata.footprints_to_geojson(footprints)))
    with open(raw / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rooftop_id", "label"])
        for fp in footprints:
            w.writerow([fp.rooftop_id, labels[fp.rooftop_id].value])
    rooftops = [geodata.clip_rooftop(raster, fp, spec.name, labels[fp.rooftop_id]) for fp in footprints]
    splits = geodata.stratified_split([r.rooftop_id for r in rooftops], [r.label for r in rooftops],
                                      TRAIN_FRACTION, spec.seed)
    for r in rooftops:
        r.split = splits[r.rooftop_id]
    base = geodata.write_prepared(out_root, spec.name, rooftops)
    if balance:
        balance_minority(out_root, spec.name, spec.seed)
    return base


# --------------------------------------------------------------------------- augmentation

class AugKind(str, enum.Enum):
    HFLIP = "hflip"
    VFLIP = "vflip"
    RANDOM_CROP = "random_crop"
    GAMMA = "gamma"
    BLUR = "blur"
    BRIGHTNESS = "brightness"
    ROTATE = "rotate"
    SHEAR = "shear"


@dataclass
class AugmentationOp:
    kind: AugKind
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.kind = AugKind(self.kind)
        p = self.params
        k = self.kind
        if k is AugKind.GAMMA and not p.get("gamma", 1.0) > 0:
            raise ValueError("gamma must be > 0")
        if k is AugKind.BLUR and p.get("sigma", 0.0) < 0:
            raise ValueError("blur sigma must be >= 0")
        if k is AugKind.ROTATE and abs(p.get("degrees", 0.0)) > 45:
            raise ValueError("|rotation| must be <= 45 degrees")
        if k is AugKind.SHEAR and abs(p.get("degrees", 0.0)) > 20:
            raise ValueError("|shear| must be <= 20 degrees")
        if k is AugKind.RANDOM_CROP and not 0.7 <= p.get("area", 1.0) <= 1.0:
            raise ValueError("crop must retain between 70% and 100% of the area")


AUG_RANGES = {
    AugKind.GAMMA: ("gamma", 0.7, 1.5),
    AugKind.BLUR: ("sigma", 0.0, 1.5),
    AugKind.BRIGHTNESS: ("delta", -30.0, 30.0),
    AugKind.ROTATE: ("degrees", -30.0, 30.0),
    AugKind.SHEAR: ("degrees", -15.0, 15.0),
    AugKind.RANDOM_CROP: ("area", 0.75, 1.0),
}


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian truncated at radius ceil(3 * sigma)."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    p = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img)
    n = img.shape[axis]
    for i, wgt in enumerate(k):
        out += wgt * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def _sample_bilinear(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    sy = np.clip(sy, 0, H - 1)
    sx = np.clip(sx, 0, W - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    ty, tx = sy - y0, sx - x0
    if img.ndim == 3:
        ty, tx = ty[..., None], tx[..., None]
    top = img[y0, x0] * (1 - tx) + img[y0, x1] * tx
    bot = img[y1, x0] * (1 - tx) + img[y1, x1] * tx
    return top * (1 - ty) + bot * ty


def _sample_nearest(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    yi = np.clip(np.floor(sy + 0.5), 0, H - 1).astype(np.intp)
    xi = np.clip(np.floor(sx + 0.5), 0, W - 1).astype(np.intp)
    return img[yi, xi]


def _source_coords(op: AugmentationOp, H: int, W: int):
    """Inverse map from output pixel grid to source coordinates, or None for identity."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2, (W - 1) / 2
    if op.kind is AugKind.ROTATE:
        t = math.radians(op.params.get("degrees", 0.0))
        if t == 0:
            return None
        dy, dx = yy - cy, xx - cx
        return cy - math.sin(t) * dx + math.cos(t) * dy, cx + math.cos(t) * dx + math.sin(t) * dy
    if op.kind is AugKind.SHEAR:
        s = math.tan(math.radians(op.params.get("degrees", 0.0)))
        if s == 0:
            return None
        return yy, xx - s * (yy - cy)
    if op.kind is AugKind.RANDOM_CROP:
        area = op.params.get("area", 1.0)
        side = math.sqrt(area)
        ch, cw = max(1, int(round(H * side))), max(1, int(round(W * side)))
        rng = np.random.default_rng(op.seed)
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
        # resize the crop back to (H, W) with half-pixel centres
        sy = (yy + 0.5) * (ch / H) - 0.5 + top
        sx = (xx + 0.5) * (cw / W) - 0.5 + left
        return np.clip(sy, top, top + ch - 1), np.clip(sx, left, left + cw - 1)
    return None


def augment(image: np.ndarray, op: AugmentationOp, mask: Optional[np.ndarray] = None):
    """Apply one op. uint8 input is rounded back to uint8; float input stays float.

    When ``mask`` is given, geometric ops are applied to it with nearest
    sampling and ``(image, mask)`` is returned.
    """
    was_uint8 = image.dtype == np.uint8
    img = image.astype(np.float64)
    out_mask = mask
    k = op.kind
    if k is AugKind.HFLIP:
        img = img[:, ::-1]
        out_mask = None if mask is None else mask[:, ::-1]
    elif k is AugKind.VFLIP:
        img = img[::-1]
        out_mask = None if mask is None else mask[::-1]
    elif k is AugKind.GAMMA:
        g = op.params.get("gamma", 1.0)
        if g != 1.0:
            img = 255.0 * (np.clip(img, 0, 255) / 255.0) ** g
    elif k is AugKind.BRIGHTNESS:
        img = img + op.params.get("delta", 0.0)
    elif k is AugKind.BLUR:
        kern = gaussian_kernel(op.params.get("sigma", 0.0))
        if len(kern) > 1:
            img = _convolve_axis(_convolve_axis(img, kern, 0), kern, 1)
    else:
        coords = _source_coords(op, img.shape[0], img.shape[1])
        if coords is not None:
            sy, sx = coords
            img = _sample_bilinear(img, sy, sx)
            if mask is not None:
                out_mask = _sample_nearest(mask, sy, sx)
    img = np.clip(img, 0, 255)
    if was_uint8:
        img = np.rint(img).astype(np.uint8)
    img = np.ascontiguousarray(img)
    if mask is None:
        return img
    return img, np.ascontiguousarray(out_mask)


def random_chain(rng: np.random.Generator) -> list:
    """One to three distinct ops drawn from the augmentation families."""
    kinds = list(AugKind)
    n = int(rng.integers(1, 4))
    chosen = [kinds[i] for i in rng.choice(len(kinds), size=n, replace=False)]
    ops = []
    for kind in chosen:
        params = {}
        if kind in AUG_RANGES:
            name, lo, hi = AUG_RANGES[kind]
            params[name] = float(rng.uniform(lo, hi))
        ops.append(AugmentationOp(kind, params, int(rng.integers(2 ** 31))))
    return ops


def apply_chain(image: np.ndarray, mask: np.ndarray, ops: Sequence[AugmentationOp]):
    for op in ops:
        image, mask = augment(image, op, mask)
    return image, mask


def balance_rooftops(rooftops: Sequence[RooftopImage], seed: int) -> list:
    """Augmented minority-class copies that equalise the training split.

    Originals are cycled in order; copy ``n`` of rooftop ``r`` is named
    ``r_aug<n>``. Test rooftops are never touched.
    """
    train = [r for r in rooftops if r.split == "train"]
    pos = [r for r in train if r.label is Label.WITH_PV]
    neg = [r for r in train if r.label is Label.NO_PV]
    if not pos or not neg:
        raise ValueError("training split needs both classes to balance")
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    need = len(majority) - len(minority)
    rng = np.random.default_rng(seed)
    taken = {r.rooftop_id for r in rooftops}
    counters: dict = {}
    out = []
    i = 0
    while len(out) < need:
        src = minority[i % len(minority)]
        i += 1
        for _ in range(20):
            img, mk = apply_chain(src.pixels, src.valid_mask, random_chain(rng))
            if mk.any():
                break
        else:
            img, mk = src.pixels.copy(), src.valid_mask.copy()
        n = counters.get(src.rooftop_id, 0) + 1
        while f"{src.rooftop_id}_aug{n}" in taken:
            n += 1
        counters[src.rooftop_id] = n
        rid = f"{src.rooftop_id}_aug{n}"
        taken.add(rid)
        out.append(RooftopImage(rid, src.city_id, img, mk, src.label, "train"))
    return out


def balance_minority(root, city: str, seed: int) -> list:
    """Balance a prepared city in place; returns the ids that were added."""
    rooftops = geodata.load_city(root, city)
    rooftops = [r for r in rooftops if "_aug" not in r.rooftop_id]
    added = balance_rooftops(rooftops, seed)
    geodata.write_prepared(root, city, list(rooftops) + added)
    return [r.rooftop_id for r in added]


def spec_from_config(name: str, values: dict, seed: int, scale: float = 1 / 5) -> CitySpec:
    """Build a CitySpec from ``<name>.<field>`` entries of a parsed config."""
    base = {s.name: s for s in benchmark_specs(seed, scale)}.get(name, CitySpec(name, seed=seed))
    kwargs = {}
    for fld in CitySpec.__dataclass_fields__:
        key = f"{name}.{fld}"
        if key not in values:
            continue
        raw = values[key]
        cur = getattr(base, fld)
        if isinstance(cur, tuple):
            kwargs[fld] = tuple(type(cur[0])(float(v)) if isinstance(cur[0], int) else float(v)
                                for v in str(raw).split(","))
        elif isinstance(cur, bool):
            kwargs[fld] = str(raw).lower() in ("1", "true", "yes")
        elif isinstance(cur, int):
            kwargs[fld] = int(raw)
        elif isinstance(cur, float):
            kwargs[fld] = float(raw)
        else:
            kwargs[fld] = raw
    return replace(base, **kwargs)
