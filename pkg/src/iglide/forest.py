"""CART regression trees and a bagged forest mapping HI vectors to RUL.

Splits scan every feature (or a per-node random subset when ``max_features``
is set) and every midpoint between consecutive distinct values, maximising the
reduction in squared error. Gains within ``TIE_RTOL`` of the best (relative to
the node's squared error) are ties and resolve to the lowest feature index,
then the lowest threshold.

Per-tree RNG: ``numpy.random.default_rng([random_state, tree_index])``, i.e.
the two integers are mixed through ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import serialize

TIE_RTOL = 1e-9


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 100
    max_depth: int = 10
    min_samples_split: int = 2
    random_state: int = 42
    bootstrap: bool = True
    max_features: int | float | None = None

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 1:
            raise ValueError("n_estimators and max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")


@dataclass
class RegressionTree:
    """Flat node arrays; children are allocated in pairs and ``left == -1``
    marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.left[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.left[node] >= 0
        return self.value[node]


@njit(cache=True)
def _build_tree(X, y, order, max_depth, min_split, k_feat, seed, tie_rtol):
    """Depth-first CART on presorted row indices: ``order[f]`` lists the rows
    sorted by feature f, and every split stably partitions each list so that
    a node's rows always occupy one contiguous, still-sorted segment."""
    n, F = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    S = order.copy()
    tmp = np.empty(n, np.int64)
    goes_left = np.zeros(n, np.bool_)
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    if k_feat < F:
        np.random.seed(seed)

    acc = 0.0
    for i in range(n):
        acc += y[S[0, i]]
    value[0] = acc / n
    count[0] = n
    n_nodes = 1
    st_node[0], st_lo[0], st_hi[0], st_depth[0] = 0, 0, n, 0
    sp = 1
    while sp > 0:
        sp -= 1
        node, lo, hi, depth = st_node[sp], st_lo[sp], st_hi[sp], st_depth[sp]
        m = hi - lo
        if depth >= max_depth or m < min_split:
            continue
        mean = value[node]
        parent = 0.0
        tot = 0.0
        for i in range(lo, hi):
            d = y[S[0, i]] - mean
            parent += d * d
            tot += d
        if parent <= 0.0:
            continue
        if k_feat < F:
            feats = np.sort(np.random.permutation(F)[:k_feat])
        else:
            feats = np.arange(F)
        gains = np.full((len(feats), m - 1), -np.inf)
        best = -np.inf
        for a in range(len(feats)):
            f = feats[a]
            sl = 0.0
            sql = 0.0
            for i in range(m - 1):
                r = S[f, lo + i]
                d = y[r] - mean
                sl += d
                sql += d * d
                if X[S[f, lo + i + 1], f] > X[r, f]:
                    nl = i + 1.0
                    nr = m - nl
                    sse_l = sql - sl * sl / nl
                    sse_r = (parent - sql) - (tot - sl) * (tot - sl) / nr
                    g = parent - sse_l - sse_r
                    gains[a, i] = g
                    if g > best:
                        best = g
        if not best > tie_rtol * parent:
            continue
        bf = -1
        bi = -1
        for a in range(len(feats)):
            for i in range(m - 1):
                if gains[a, i] >= best - tie_rtol * parent:
                    bf = feats[a]
                    bi = i
                    break
            if bf >= 0:
                break
        xa = X[S[bf, lo + bi], bf]
        xb = X[S[bf, lo + bi + 1], bf]
        thr = 0.5 * (xa + xb)
        if not (xa <= thr and thr < xb):
            thr = xa

        n_left = 0
        sum_l = 0.0
        sum_r = 0.0
        for i in range(lo, hi):
            r = S[0, i]
            gl = X[r, bf] <= thr
            goes_left[r] = gl
            if gl:
                n_left += 1
                sum_l += y[r]
            else:
                sum_r += y[r]
        for f in range(F):
            p = 0
            q = n_left
            for i in range(lo, hi):
                r = S[f, i]
                if goes_left[r]:
                    tmp[p] = r
                    p += 1
                else:
                    tmp[q] = r
                    q += 1
            for i in range(m):
                S[f, lo + i] = tmp[i]

        feature[node] = bf
        threshold[node] = thr
        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        left[node] = li
        right[node] = ri
        value[li] = sum_l / n_left
        count[li] = n_left
        value[ri] = sum_r / (m - n_left)
        count[ri] = m - n_left
        # right pushed first so the left subtree is expanded first
        st_node[sp], st_lo[sp], st_hi[sp], st_depth[sp] = ri, lo + n_left, hi, depth + 1
        sp += 1
        st_node[sp], st_lo[sp], st_hi[sp], st_depth[sp] = li, lo, lo + n_left, depth + 1
        sp += 1
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        count[:n_nodes].copy(),
    )


def fit_tree(X, y, max_depth: int = 10, min_samples_split: int = 2, max_features=None, rng=None) -> RegressionTree:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    n, F = X.shape
    if n == 0:
        raise ForestError("empty training data")
    k_feat = _n_features(max_features, F)
    seed = 0
    if k_feat < F:
        rng = rng if rng is not None else np.random.default_rng(0)
        seed = int(rng.integers(0, 2**31 - 1))
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    parts = _build_tree(X, y, order, max_depth, min_samples_split, k_feat, seed, TIE_RTOL)
    return RegressionTree(*parts)


def _n_features(max_features, F: int) -> int:
    if max_features is None:
        return F
    if isinstance(max_features, float) and 0 < max_features <= 1:
        return max(1, int(max_features * F))
    return max(1, min(F, int(max_features)))


@dataclass
class Forest:
    trees: list[RegressionTree]
    feature_names: list[str]
    meta: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.feature_names):
            raise ForestError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        acc = np.zeros(len(X))
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)


def _tree_rng(random_state: int, index: int) -> np.random.Generator:
    return np.random.default_rng([random_state, index])


def fit_forest(X, y, cfg: ForestConfig | None = None, feature_names=None, n_jobs: int = 1) -> Forest:
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ForestError("empty training data")
    if len(y) != len(X):
        raise ForestError(f"{len(X)} rows but {len(y)} targets")
    if len(X) < cfg.min_samples_split:
        raise ForestError("fewer rows than min_samples_split")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    bad = ~np.isfinite(X).all(axis=0)
    if bad.any():
        raise ForestError(f"non-finite values in feature {names[int(np.argmax(bad))]!r}")
    if not np.isfinite(y).all():
        raise ForestError("non-finite targets")
    n = len(X)

    def one(i):
        rng = _tree_rng(cfg.random_state, i)
        idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        return fit_tree(X[idx], y[idx], cfg.max_depth, cfg.min_samples_split, cfg.max_features, rng)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            trees = list(ex.map(one, range(cfg.n_estimators)))
    else:
        trees = [one(i) for i in range(cfg.n_estimators)]
    meta = {"config": dataclasses.asdict(cfg), "config_hash": config_digest(dataclasses.asdict(cfg))}
    return Forest(trees, names, meta)


def predict(forest: Forest, X) -> np.ndarray:
    return forest.predict(X)


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- persistence

_TREE_FIELDS = ("feature", "threshold", "left", "right", "value", "n_samples")


def save_forest(forest: Forest, path) -> None:
    offsets = np.cumsum([0] + [t.n_nodes for t in forest.trees]).astype(np.int64)
    arrays = {"tree_offsets": offsets}
    for f in _TREE_FIELDS:
        arrays[f] = np.concatenate([getattr(t, f) for t in forest.trees])
    meta = {"kind": "forest", "feature_names": forest.feature_names, **forest.meta}
    serialize.save(path, meta, arrays)


def load_forest(path, expected_features=None) -> Forest:
    meta, arrays = serialize.load(path)
    if meta.get("kind") != "forest":
        raise ForestError(f"{path} is not a forest checkpoint")
    names = meta.pop("feature_names")
    meta.pop("kind")
    if expected_features is not None and list(expected_features) != names:
        raise ForestError(f"feature manifest mismatch: forest {names} vs input {list(expected_features)}")
    off = arrays["tree_offsets"]
    trees = [
        RegressionTree(*(arrays[f][off[i] : off[i + 1]] for f in _TREE_FIELDS)) for i in range(len(off) - 1)
    ]
    return Forest(trees, names, meta)
