"""Logistic regression, linear/RFF support vector classifier and random forest.

All three work on standardised descriptors (identity standardisation for the
forest). ``C`` multiplies the data term of every objective.
"""

from __future__ import annotations

import enum
import hashlib
import json
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _blob

LR_SOLVERS = ("lbfgs", "liblinear")
RFF_DIM = 256
GRAD_TOL = 1e-6
MAX_ITER = 1000
GAP_TOL = 1e-6

FIT_CALLS: Counter = Counter()
_fit_lock = threading.Lock()


class ClassifyError(ValueError):
    pass


class Family(str, enum.Enum):
    LR = "lr"
    RF = "rf"
    SVC = "svc"


@dataclass(frozen=True)
class HyperparameterCombo:
    family: Family
    C: Optional[float] = None
    solver: Optional[str] = None
    n_estimators: Optional[int] = None
    max_depth: Optional[int] = None
    kernel: Optional[str] = None
    grid_size: Optional[int] = None
    K: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        f = self.family
        if f is Family.LR:
            if self.C is None or self.C <= 0 or self.solver not in LR_SOLVERS:
                raise ClassifyError(f"bad LR combo {self}")
            if self.n_estimators is not None or self.max_depth is not None or self.kernel is not None:
                raise ClassifyError("LR combo carries non-LR fields")
        elif f is Family.RF:
            if self.n_estimators is None or self.n_estimators < 1:
                raise ClassifyError(f"bad RF combo {self}")
            if self.C is not None or self.solver is not None or self.kernel is not None:
                raise ClassifyError("RF combo carries non-RF fields")
        else:
            if self.C is None or self.C <= 0 or self.kernel not in ("linear", "rbf"):
                raise ClassifyError(f"bad SVC combo {self}")
            if self.solver is not None or self.n_estimators is not None or self.max_depth is not None:
                raise ClassifyError("SVC combo carries non-SVC fields")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return {k: v for k, v in d.items() if v is not None or k == "max_depth" and self.family is Family.RF}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperparameterCombo":
        return cls(**d)

    def key(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canon.encode()).hexdigest()[:12]

    def label(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.to_dict().items())


@dataclass
class Dataset2D:
    X: np.ndarray
    y: np.ndarray
    ids: list = field(default_factory=list)
    cities: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=np.int64)
        n = self.X.shape[0]
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if not self.cities:
            self.cities = [""] * n
        if not (len(self.y) == len(self.ids) == len(self.cities) == n):
            raise ClassifyError("inconsistent dataset lengths")

    def __len__(self):
        return self.X.shape[0]


@dataclass
class Tree:
    feature: np.ndarray  # (n_nodes,) int, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, 2) class counts

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def leaf_class(self) -> np.ndarray:
        return (self.value[:, 1] > self.value[:, 0]).astype(np.int64)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                return node
            go_left = X[rows, np.where(internal, feat, 0)] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)


@dataclass
class TrainedModel:
    family: Family
    combo: HyperparameterCombo
    mean: np.ndarray
    scale: np.ndarray
    weights: Optional[np.ndarray] = None
    bias: float = 0.0
    rff_W: Optional[np.ndarray] = None
    rff_b: Optional[np.ndarray] = None
    rff_gamma: Optional[float] = None
    trees: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _record_fit(family: Family):
    with _fit_lock:
        FIT_CALLS[family.value] += 1
        FIT_CALLS["total"] += 1


def _check_training(data: Dataset2D):
    if len(data) == 0:
        raise ClassifyError("empty training data")
    if not np.all(np.isfinite(data.X)):
        raise ClassifyError("non-finite features")


def _check_two_classes(data: Dataset2D):
    if len(np.unique(data.y)) < 2:
        raise ClassifyError("training data holds a single class")


def standardization(X: np.ndarray) -> tuple:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def _signed(y: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(y) > 0, 1.0, -1.0)


# --------------------------------------------------------------------------- logistic regression

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lr_objective(w: np.ndarray, b: float, X: np.ndarray, ys: np.ndarray, C: float) -> float:
    z = X @ w + b
    return 0.5 * float(w @ w) + C * float(np.logaddexp(0.0, -ys * z).sum())


def lr_gradient(w: np.ndarray, b: float, X: np.ndarray, ys: np.ndarray, C: float) -> tuple:
    z = X @ w + b
    r = -ys * _sigmoid(-ys * z)
    return w + C * (X.T @ r), C * float(r.sum())


def _lr_lbfgs(X, ys, C, memory=10, history=None):
    M = X.shape[1]
    theta = np.zeros(M + 1)

    def fg(t):
        gw, gb = lr_gradient(t[:M], t[M], X, ys, C)
        return lr_objective(t[:M], t[M], X, ys, C), np.append(gw, gb)

    f, g = fg(theta)
    if history is not None:
        history.append(f)
    S, Y = [], []
    it = 0
    for it in range(1, MAX_ITER + 1):
        if np.abs(g).max() < GRAD_TOL:
            break
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            q += (a - (y @ q) / (y @ s)) * s
        d = -q
        slope = g @ d
        if slope >= 0:
            d, slope = -g, -(g @ g)
            S.clear()
            Y.clear()
        step = 1.0
        for _ in range(60):
            cand = theta + step * d
            f_new, g_new = fg(cand)
            if f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        if f_new > f:
            break
        s, y = cand - theta, g_new - g
        if s @ y > 1e-12:
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        theta, f, g = cand, f_new, g_new
        if history is not None:
            history.append(f)
    return theta[:M], float(theta[M]), it


def _lr_coordinate_descent(X, ys, C):
    """Cyclic Newton coordinate descent on the primal, bias last and unregularised."""
    N, M = X.shape
    cols = [np.ascontiguousarray(X[:, j]) for j in range(M)] + [np.ones(N)]
    theta = np.zeros(M + 1)
    z = np.zeros(N)
    epoch = 0
    for epoch in range(1, MAX_ITER + 1):
        for j in range(M + 1):
            xj = cols[j]
            reg = 1.0 if j < M else 0.0
            p = _sigmoid(-ys * z)
            g = reg * theta[j] - C * float(np.dot(ys * xj, p))
            h = reg + C * float((xj * xj) @ (p * (1 - p))) + 1e-12
            d = -g / h
            if d == 0.0:
                continue
            base = np.logaddexp(0.0, -ys * z).sum()
            lam = 1.0
            for _ in range(30):
                dz = lam * d * xj
                delta = (0.5 * reg * ((theta[j] + lam * d) ** 2 - theta[j] ** 2)
                         + C * (np.logaddexp(0.0, -ys * (z + dz)).sum() - base))
                if delta <= 0.01 * lam * d * g:
                    theta[j] += lam * d
                    z += dz
                    break
                lam *= 0.5
        gw, gb = lr_gradient(theta[:M], theta[M], X, ys, C)
        if max(np.abs(gw).max(initial=0.0), abs(gb)) < GRAD_TOL:
            break
    return theta[:M], float(theta[M]), epoch


def lr_fit(data: Dataset2D, C: float, solver_label: str = "lbfgs", seed: int = 0,
           history: Optional[list] = None) -> TrainedModel:
    """L2-regularised logistic regression.

    ``"lbfgs"`` runs limited-memory quasi-Newton on the full primal;
    ``"liblinear"`` runs cyclic coordinate descent. Both stop at gradient
    infinity-norm < 1e-6 or 1000 iterations. ``seed`` is accepted for
    interface symmetry; both solvers are deterministic.
    """
    combo = HyperparameterCombo(Family.LR, C=float(C), solver=solver_label)
    _check_training(data)
    _check_two_classes(data)
    _record_fit(Family.LR)
    mean, scale = standardization(data.X)
    Xs = (data.X - mean) / scale
    ys = _signed(data.y)
    if solver_label == "lbfgs":
        w, b, iters = _lr_lbfgs(Xs, ys, C, history=history)
    else:
        w, b, iters = _lr_coordinate_descent(Xs, ys, C)
    return TrainedModel(Family.LR, combo, mean, scale, weights=w, bias=b,
                        info={"iterations": iters, "objective": lr_objective(w, b, Xs, ys, C)})


# --------------------------------------------------------------------------- SVC

def svm_objective(w: np.ndarray, b: float, X: np.ndarray, ys: np.ndarray, C: float) -> float:
    margins = 1 - ys * (X @ w + b)
    return 0.5 * float(w @ w) + 0.5 * b * b + C * float(np.maximum(margins, 0).sum())


def svm_subgradient(w: np.ndarray, b: float, X: np.ndarray, ys: np.ndarray, C: float) -> tuple:
    active = (1 - ys * (X @ w + b)) > 0
    r = -ys * active
    return w + C * (X.T @ r), b + C * float(r.sum())


def _svm_dual_cd(Z: np.ndarray, ys: np.ndarray, C: float) -> tuple:
    """Dual coordinate descent for the L1-loss SVM; bias is an appended unit feature."""
    N, M = Z.shape
    Za = np.hstack([Z, np.ones((N, 1))])
    rows = [Za[i] for i in range(N)]
    qii = np.einsum("ij,ij->i", Za, Za)
    alpha = np.zeros(N)
    w = np.zeros(M + 1)
    gap = np.inf
    epoch = 0
    for epoch in range(1, MAX_ITER + 1):
        for i in range(N):
            xi = rows[i]
            G = ys[i] * float(w @ xi) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(G, 0.0)
            elif a == C:
                pg = max(G, 0.0)
            else:
                pg = G
            if pg != 0.0 and qii[i] > 0:
                new = min(max(a - G / qii[i], 0.0), C)
                w += (new - a) * ys[i] * xi
                alpha[i] = new
        primal = 0.5 * float(w @ w) + C * float(np.maximum(1 - ys * (Za @ w), 0).sum())
        dual = float(alpha.sum()) - 0.5 * float(w @ w)
        gap = primal - dual
        if gap <= GAP_TOL * max(1.0, abs(primal)):
            break
    return w[:M], float(w[M]), epoch, gap


def rff_map(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(2.0 / W.shape[1]) * np.cos(X @ W + b)


def svm_fit(data: Dataset2D, C: float, kernel: str = "linear", seed: int = 0,
            gamma: Optional[float] = None, rff_dim: int = RFF_DIM) -> TrainedModel:
    """Hinge-loss SVM by dual coordinate descent.

    ``kernel="rbf"`` maps the standardised inputs through ``rff_dim`` random
    Fourier features (bandwidth ``1 / (M * var(X))`` unless ``gamma`` is given)
    and trains the same linear solver on the mapped features, which
    approximates an RBF-kernel machine.
    """
    combo = HyperparameterCombo(Family.SVC, C=float(C), kernel=kernel)
    _check_training(data)
    _check_two_classes(data)
    _record_fit(Family.SVC)
    mean, scale = standardization(data.X)
    Xs = (data.X - mean) / scale
    ys = _signed(data.y)
    W = bvec = None
    Z = Xs
    if kernel == "rbf":
        M = Xs.shape[1]
        var = float(Xs.var())
        if gamma is None:
            gamma = 1.0 / (M * var) if var > 0 else 1.0
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, np.sqrt(2.0 * gamma), size=(M, rff_dim))
        bvec = rng.uniform(0.0, 2 * np.pi, size=rff_dim)
        Z = rff_map(Xs, W, bvec)
    w, b, epochs, gap = _svm_dual_cd(Z, ys, C)
    return TrainedModel(Family.SVC, combo, mean, scale, weights=w, bias=b, rff_W=W, rff_b=bvec,
                        rff_gamma=gamma, info={"epochs": epochs, "duality_gap": gap})


# --------------------------------------------------------------------------- random forest

def _best_split(Xn: np.ndarray, yn: np.ndarray):
    """Lowest weighted-Gini split over the columns of ``Xn``; None if all constant."""
    n, m = Xn.shape
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ysort = yn[order]
    pos_left = np.cumsum(ysort, axis=0)[:-1]  # (n-1, m)
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    pos_total = yn.sum()
    pos_right = pos_total - pos_left
    imp = 2 * pos_left * (n_left - pos_left) / n_left + 2 * pos_right * (n_right - pos_right) / n_right
    valid = xs[:-1] < xs[1:]
    if not valid.any():
        return None
    imp = np.where(valid, imp, np.inf).T  # (m, n-1): candidate order first
    flat = int(np.argmin(imp))
    j, i = divmod(flat, n - 1)
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = lo + (hi - lo) / 2
    if not lo <= thr < hi:
        thr = lo
    return j, thr


def _grow_tree(X: np.ndarray, y: np.ndarray, max_depth: Optional[int], mtry: int,
               rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        pos = int(y[idx].sum())
        value.append((len(idx) - pos, pos))
        return len(feature) - 1

    M = X.shape[1]
    root_idx = np.arange(X.shape[0])
    stack = [(new_node(root_idx), root_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        neg, pos = value[node]
        if pos == 0 or neg == 0 or len(idx) < 2:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        feats = rng.choice(M, size=mtry, replace=False)
        found = _best_split(X[np.ix_(idx, feats)], y[idx])
        if found is None:
            continue
        j, thr = found
        f = int(feats[j])
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.float64),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.asarray(value, dtype=np.float64).reshape(-1, 2))


def rf_fit(data: Dataset2D, n_estimators: int = 100, max_depth: Optional[int] = None,
           seed: int = 0) -> TrainedModel:
    """Bagged CART trees with sqrt(M) candidate features per node; tree t uses seed + t."""
    combo = HyperparameterCombo(Family.RF, n_estimators=int(n_estimators), max_depth=max_depth)
    _check_training(data)
    _record_fit(Family.RF)
    X = data.X
    y = data.y.astype(np.int64)
    N, M = X.shape
    mtry = int(np.ceil(np.sqrt(M)))
    trees = []
    for t in range(n_estimators):
        rng = np.random.default_rng(seed + t)
        boot = rng.integers(0, N, size=N)
        trees.append(_grow_tree(X[boot], y[boot], max_depth, mtry, rng))
    return TrainedModel(Family.RF, combo, np.zeros(M), np.ones(M), trees=trees)


# --------------------------------------------------------------------------- fit / predict

def fit(data: Dataset2D, combo: HyperparameterCombo, seed: int = 0) -> TrainedModel:
    if combo.family is Family.LR:
        m = lr_fit(data, combo.C, combo.solver, seed)
    elif combo.family is Family.RF:
        m = rf_fit(data, combo.n_estimators, combo.max_depth, seed)
    else:
        m = svm_fit(data, combo.C, combo.kernel, seed)
    m.combo = combo
    return m


def decision_scores(model: TrainedModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ClassifyError(f"expected {model.dim} features, got {X.shape[1]}")
    Xs = (X - model.mean) / model.scale
    if model.family is Family.LR:
        return _sigmoid(Xs @ model.weights + model.bias)
    if model.family is Family.SVC:
        Z = rff_map(Xs, model.rff_W, model.rff_b) if model.rff_W is not None else Xs
        return Z @ model.weights + model.bias
    votes = np.zeros(X.shape[0])
    for tree in model.trees:
        votes += tree.leaf_class()[tree.apply(Xs)]
    return votes / len(model.trees)


def predict(model: TrainedModel, X) -> tuple:
    """Return (labels, scores): probability for LR, vote fraction for RF, margin for SVC."""
    s = decision_scores(model, X)
    cut = 0.0 if model.family is Family.SVC else 0.5
    return (s > cut).astype(np.int64), s


# --------------------------------------------------------------------------- serialization

def dumps_model(model: TrainedModel) -> bytes:
    header = {
        "version": 1,
        "kind": "model",
        "family": model.family.value,
        "combo": model.combo.to_dict(),
        "standardization": {"kind": "identity" if model.family is Family.RF else "zscore",
                            "dim": model.dim},
        "bias": model.bias,
        "rff_gamma": model.rff_gamma,
        "info": model.info,
    }
    arrays = {"mean": model.mean, "scale": model.scale}
    if model.weights is not None:
        arrays["weights"] = model.weights
    if model.rff_W is not None:
        arrays["rff_W"] = model.rff_W
        arrays["rff_b"] = model.rff_b
    if model.trees:
        sizes = np.array([t.n_nodes for t in model.trees], dtype=np.float64)
        arrays["tree_sizes"] = sizes
        for name in ("feature", "threshold", "left", "right", "value"):
            arrays[f"tree_{name}"] = np.concatenate([getattr(t, name).reshape(-1) for t in model.trees])
    return _blob.dumps(header, arrays)


def loads_model(blob: bytes) -> TrainedModel:
    h, a = _blob.loads(blob, "model")
    trees = []
    if "tree_sizes" in a:
        pos = 0
        for size in a["tree_sizes"].astype(np.int64):
            sl = slice(pos, pos + size)
            trees.append(Tree(a["tree_feature"][sl].astype(np.int64), a["tree_threshold"][sl].copy(),
                              a["tree_left"][sl].astype(np.int64), a["tree_right"][sl].astype(np.int64),
                              a["tree_value"][2 * pos:2 * (pos + size)].reshape(-1, 2).copy()))
            pos += size
    return TrainedModel(Family(h["family"]), HyperparameterCombo.from_dict(h["combo"]),
                        a["mean"], a["scale"], a.get("weights"), h["bias"], a.get("rff_W"),
                        a.get("rff_b"), h.get("rff_gamma"), trees, h.get("info", {}))


def expand_grid(families: Sequence[str], lr_c, lr_solvers, rf_n, rf_depth, svc_c, svc_kernels) -> list:
    """Cartesian classifier grid in a fixed family/parameter order."""
    out = []
    for fam in families:
        fam = Family(fam)
        if fam is Family.LR:
            out += [HyperparameterCombo(fam, C=float(c), solver=s) for c in lr_c for s in lr_solvers]
        elif fam is Family.RF:
            out += [HyperparameterCombo(fam, n_estimators=int(n), max_depth=d) for n in rf_n for d in rf_depth]
        else:
            out += [HyperparameterCombo(fam, C=float(c), kernel=k) for c in svc_c for k in svc_kernels]
    return out
