import numpy as np
import pytest

from gridpv import classify, phases
from gridpv.features import LocalFeatureSet
from gridpv.geodata import Label, RooftopImage


def make_rooftop(h, w, mask=None, value=128, rid="r0", city="c", label=Label.NO_PV, split=None, seed=None):
    if seed is None:
        px = np.full((h, w, 3), value, dtype=np.uint8)
    else:
        px = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    return RooftopImage(rid, city, px, mask, label, split)


def vector_city(name, X, y, split):
    """City of 1x1 dummy rooftops whose BR features are the given rows."""
    roofs, sets = [], []
    for i, (row, lab, sp) in enumerate(zip(X, y, split)):
        label = Label.WITH_PV if lab else Label.NO_PV
        rid = f"{name}_{i}"
        roofs.append(make_rooftop(1, 1, rid=rid, city=name, label=label, split=sp))
        sets.append(LocalFeatureSet(rid, name, np.atleast_2d(row), label))
    return phases.CityData(name, roofs), sets


def br_config(classifiers=None, **kw):
    clf = classifiers or [classify.HyperparameterCombo("lr", C=1.0, solver="lbfgs")]
    return phases.PipelineConfig(approach="br", classifiers=clf, jobs=1, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
