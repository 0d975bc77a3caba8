"""F1 scores, city/global aggregation and the weighted stopping score."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

DEFAULT_WEIGHT = 0.5
DEFAULT_THRESHOLD = 0.90


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_labels(cls, predictions, labels) -> "ConfusionCounts":
        p = np.asarray(predictions).astype(bool)
        t = np.asarray(labels).astype(bool)
        if p.shape != t.shape:
            raise ValueError("predictions and labels differ in length")
        if p.size == 0:
            raise ValueError("cannot score an empty set")
        return cls(int((p & t).sum()), int((p & ~t).sum()), int((~p & t).sum()), int((~p & ~t).sum()))

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


def f1(predictions, labels) -> float:
    """F1 of the with_pv class; 0 when there are no positives on either side."""
    return ConfusionCounts.from_labels(predictions, labels).f1


def round2(x: float) -> float:
    """Round half away from zero to two decimals (0.895 -> 0.90)."""
    d = Decimal(repr(round(float(x), 12)))
    return float(d.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class ScoreReport:
    per_city: dict
    global_f1: float
    weighted_f1: float
    rounded_weighted: float
    elapsed: float = 0.0
    weight: float = DEFAULT_WEIGHT

    def passes(self, threshold: float = DEFAULT_THRESHOLD) -> bool:
        return self.rounded_weighted >= round2(threshold)

    def to_dict(self) -> dict:
        return {
            "per_city": dict(self.per_city),
            "global_f1": self.global_f1,
            "weighted_f1": self.weighted_f1,
            "rounded": self.rounded_weighted,
            "elapsed_seconds": self.elapsed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        return cls(dict(d["per_city"]), d["global_f1"], d["weighted_f1"], d["rounded"],
                   d.get("elapsed_seconds", 0.0))

    def render(self) -> str:
        lines = [f"{'city':<16}{'F1':>8}"]
        for c, v in self.per_city.items():
            lines.append(f"{c:<16}{v:>8.2f}")
        lines.append(f"{'global':<16}{self.global_f1:>8.2f}")
        lines.append(f"{'weighted':<16}{self.weighted_f1:>8.4f}  ({self.rounded_weighted:.2f})")
        return "\n".join(lines)


def weighted_f1(per_city: Mapping[str, float], global_f1: float, w: float = DEFAULT_WEIGHT,
                elapsed: float = 0.0) -> ScoreReport:
    """w * mean(city F1s) + (1 - w) * global F1."""
    if not per_city:
        raise ValueError("need at least one city score")
    if not 0 <= w <= 1:
        raise ValueError("weight must be in [0, 1]")
    mean_city = sum(per_city.values()) / len(per_city)
    value = w * mean_city + (1 - w) * global_f1
    return ScoreReport(dict(per_city), float(global_f1), float(value), round2(value), elapsed, w)


def score_predictions(predictions: Sequence[int], labels: Sequence[int], cities: Sequence[str],
                      w: float = DEFAULT_WEIGHT, elapsed: float = 0.0) -> ScoreReport:
    """City F1 on each city's own rows, global F1 on all rows, combined by :func:`weighted_f1`."""
    p = np.asarray(predictions)
    t = np.asarray(labels)
    cities = list(cities)
    per_city = {}
    for c in dict.fromkeys(cities):
        sel = np.array([ci == c for ci in cities])
        per_city[c] = f1(p[sel], t[sel])
    return weighted_f1(per_city, f1(p, t), w, elapsed)
