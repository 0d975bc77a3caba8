"""Non-overlapping g x g grid decomposition of a rooftop crop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geodata import RooftopImage

DEFAULT_MIN_COVERAGE = 0.5


class NoUsableTiles(ValueError):
    pass


@dataclass
class GridTile:
    rooftop_id: str
    index: tuple  # (row, col) in the lattice
    pixels: np.ndarray  # (g, g, 3) uint8
    coverage: float


def lattice_cells(height: int, width: int, g: int):
    """Yield ``((row, col), row_slice, col_slice)`` for the lattice anchored at the crop origin."""
    for i, r in enumerate(range(0, height, g)):
        for j, c in enumerate(range(0, width, g)):
            yield (i, j), slice(r, min(r + g, height)), slice(c, min(c + g, width))


def tile(rooftop: RooftopImage, g: int, min_coverage: float = DEFAULT_MIN_COVERAGE) -> list:
    """Split a rooftop into g x g tiles, row-major.

    Coverage is the fraction of the g*g cell covered by valid mask pixels, so
    partial edge cells are penalised by their missing area. Masked-out pixels
    are zeroed, then partial cells are padded by edge replication.
    """
    if g < 8:
        raise ValueError("grid size must be >= 8")
    if not 0 < min_coverage <= 1:
        raise ValueError("min_coverage must be in (0, 1]")
    h, w = rooftop.shape
    if h < 1 or w < 1:
        raise ValueError("rooftop smaller than 1x1")
    masked = np.where(rooftop.valid_mask[:, :, None], rooftop.pixels, 0).astype(np.uint8)
    out = []
    for idx, rs, cs in lattice_cells(h, w, g):
        coverage = float(rooftop.valid_mask[rs, cs].sum()) / (g * g)
        if coverage <= 0 or coverage < min_coverage:
            continue
        cell = masked[rs, cs]
        ph, pw = g - cell.shape[0], g - cell.shape[1]
        if ph or pw:
            cell = np.pad(cell, ((0, ph), (0, pw), (0, 0)), mode="edge")
        out.append(GridTile(rooftop.rooftop_id, idx, np.ascontiguousarray(cell), coverage))
    if not out:
        raise NoUsableTiles(f"rooftop {rooftop.rooftop_id!r}: no usable grids at g={g}")
    return out


def tile_or_best(rooftop: RooftopImage, g: int, min_coverage: float = DEFAULT_MIN_COVERAGE) -> list:
    """Like :func:`tile`, but falls back to the single best-covered cell.

    Keeps every rooftop representable at every grid size so that descriptor
    sets stay aligned across a hyperparameter grid.
    """
    try:
        return tile(rooftop, g, min_coverage)
    except NoUsableTiles:
        tiles = tile(rooftop, g, 1e-12)
        best = max(range(len(tiles)), key=lambda i: (tiles[i].coverage, -i))
        return [tiles[best]]


def tile_stats(rooftop: RooftopImage, g: int, min_coverage: float = DEFAULT_MIN_COVERAGE):
    """(kept, total) lattice cell counts."""
    h, w = rooftop.shape
    total = -(-h // g) * -(-w // g)
    try:
        kept = len(tile(rooftop, g, min_coverage))
    except NoUsableTiles:
        kept = 0
    return kept, total
