import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridpv import evaluation
from gridpv.evaluation import ConfusionCounts, ScoreReport, round2, weighted_f1


def test_f1_examples():
    assert evaluation.f1([1, 0, 1], [1, 0, 1]) == 1.0
    c = ConfusionCounts(tp=3, fp=1, fn=2)
    assert c.f1 == pytest.approx(0.6667, abs=5e-5)
    assert evaluation.f1([0, 0], [0, 0]) == 0.0


def test_f1_errors():
    with pytest.raises(ValueError):
        evaluation.f1([1, 0], [1])
    with pytest.raises(ValueError):
        evaluation.f1([], [])


def test_confusion_counts_sum():
    c = ConfusionCounts.from_labels([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 1)


@pytest.mark.parametrize("cities,glob,exact,rounded", [
    ({"RCP": 1.00, "Chakan": 0.94}, 0.96, 0.965, 0.97),
    ({"RCP": 0.91, "Chakan": 0.98, "Pune": 0.89}, 0.92, 0.92333333, 0.92),
])
def test_weighted_examples(cities, glob, exact, rounded):
    r = weighted_f1(cities, glob)
    assert r.weighted_f1 == pytest.approx(exact, abs=1e-8)
    assert r.rounded_weighted == rounded


def test_single_city_identity():
    r = evaluation.score_predictions([1, 0, 1, 1], [1, 0, 0, 1], ["a"] * 4)
    assert r.weighted_f1 == pytest.approx(r.per_city["a"]) == pytest.approx(r.global_f1)


@pytest.mark.parametrize("x,expected", [(0.895, 0.90), (0.8949, 0.89), (0.894, 0.89), (0.905, 0.91),
                                        (0.965, 0.97), (1.0, 1.0), (0.0, 0.0), (0.125, 0.13)])
def test_round_half_away(x, expected):
    assert round2(x) == expected


def test_threshold_boundary():
    assert ScoreReport({}, 0, 0.895, round2(0.895)).passes(0.90)
    assert not ScoreReport({}, 0, 0.894, round2(0.894)).passes(0.90)


def test_weighted_errors():
    with pytest.raises(ValueError):
        weighted_f1({}, 0.5)
    with pytest.raises(ValueError):
        weighted_f1({"a": 1.0}, 0.5, w=1.5)


unit = st.floats(0, 1, allow_nan=False)


@given(st.lists(unit, min_size=1, max_size=5), unit, st.floats(0, 1), st.integers(0, 5), st.floats(0, 0.3))
def test_weighted_bounds_and_monotone(cities, glob, w, idx, bump):
    per = {f"c{i}": v for i, v in enumerate(cities)}
    r = weighted_f1(per, glob, w)
    vals = list(cities) + [glob]
    assert min(vals) - 1e-12 <= r.weighted_f1 <= max(vals) + 1e-12
    key = f"c{idx % len(cities)}"
    up = dict(per)
    up[key] = min(1.0, up[key] + bump)
    assert weighted_f1(up, glob, w).weighted_f1 >= r.weighted_f1 - 1e-12
    assert weighted_f1(per, min(1.0, glob + bump), w).weighted_f1 >= r.weighted_f1 - 1e-12


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40), st.randoms())
def test_f1_permutation_invariant(pairs, rnd):
    p, t = zip(*pairs)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    p2, t2 = zip(*shuffled)
    assert evaluation.f1(p, t) == evaluation.f1(p2, t2)


def test_report_json_and_render():
    r = evaluation.score_predictions([1, 0, 1, 0], [1, 0, 0, 0], ["a", "a", "b", "b"], elapsed=2.5)
    d = r.to_dict()
    assert set(d) == {"per_city", "global_f1", "weighted_f1", "rounded", "elapsed_seconds"}
    assert ScoreReport.from_dict(d).to_dict() == d
    text = r.render()
    assert "global" in text and "weighted" in text
    assert list(r.per_city) == ["a", "b"]
