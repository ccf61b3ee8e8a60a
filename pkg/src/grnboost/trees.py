"""Depth-wise greedy regression trees with second-order (Newton) fitting.

A tree is fitted to per-sample gradients ``g_i`` (length ``K``) and Hessian
blocks ``h_i`` (``K x K``): each leaf ``j`` takes the weight

    w_j = -(H_j + |I_j| * lam * I)^{-1} G_j,

where ``G_j`` and ``H_j`` aggregate the gradients/Hessians of the samples
routed to the leaf.  Regularizing in the averaged prediction space adds
``lam`` to every *per-sample* block, which after aggregation scales with the
leaf's sample count ``|I_j|``; the familiar fixed-scalar convention
``H_j + lam*I`` is available through ``count_scaled_lambda=False``.

Splits are enumerated exactly: thresholds at midpoints between consecutive
distinct sorted feature values, gain measured as the increase in
``sum_j G_j' (H_j + |I_j| lam I)^{-1} G_j / 2``.  Ties are broken towards the
lowest feature index, then the lowest threshold, so the fitted tree is a
deterministic function of its inputs for any worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EmptyDatasetError",
    "LeafSolveSingularError",
    "SplitCandidate",
    "Tree",
    "apply",
    "fit_tree",
    "predict",
    "scale",
    "tree_from_dict",
    "tree_from_json",
    "tree_to_dict",
    "tree_to_json",
]

GAIN_EPSILON = 1e-12


class LeafSolveSingularError(ValueError):
    """A leaf aggregate Hessian could not be solved (lambda = 0)."""


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    gain: float
    left_count: int
    right_count: int


@dataclass
class Tree:
    """Flat node arrays; node 0 is the root.

    Internal node i:  feature[i] >= 0, threshold[i], children left/right.
    Leaf node i:      feature[i] == -1, leaf_value[i] is its weight in R^K.
    """

    feature: np.ndarray          # (n_nodes,) int, -1 for leaves
    threshold: np.ndarray        # (n_nodes,) float
    children_left: np.ndarray    # (n_nodes,) int, -1 for leaves
    children_right: np.ndarray   # (n_nodes,) int, -1 for leaves
    leaf_value: np.ndarray       # (n_nodes, K) float, zeros for internal nodes
    depth: np.ndarray            # (n_nodes,) int
    n_features: int
    output_dim: int
    max_depth: int
    leaf_sample_count: np.ndarray = field(default=None)
    gain: np.ndarray = field(default=None)  # split gain, 0 for leaves

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0


def _aggregate_k1(g, h):
    return float(np.sum(g)), float(np.sum(h))


def _leaf_weight(G, H, count, lam, count_scaled, k):
    reg = count * lam if count_scaled else lam
    if k == 1:
        denom = H + reg
        if denom <= 0.0 or not np.isfinite(denom):
            raise LeafSolveSingularError("leaf solve singular")
        return np.array([-G / denom])
    mat = H + reg * np.eye(k)
    try:
        # symmetric positive-definite path; PSD blocks + positive reg keep it SPD
        c = np.linalg.cholesky(mat)
        w = -np.linalg.solve(c.T, np.linalg.solve(c, G))
    except np.linalg.LinAlgError as exc:
        raise LeafSolveSingularError("leaf solve singular") from exc
    if not np.all(np.isfinite(w)):
        raise LeafSolveSingularError("leaf solve singular")
    return w


def _scan_feature_k1(xs, gs, hs, G, H, count, lam, min_leaf, count_scaled, parent_score):
    """Best (gain, threshold) along one pre-sorted feature; K = 1."""
    Gl = np.cumsum(gs)[:-1]
    Hl = np.cumsum(hs)[:-1]
    cl = np.arange(1, count)
    cr = count - cl
    if count_scaled:
        dl, dr = Hl + cl * lam, (H - Hl) + cr * lam
    else:
        dl, dr = Hl + lam, (H - Hl) + lam
    valid = (xs[1:] > xs[:-1]) & (cl >= min_leaf) & (cr >= min_leaf)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = Gl * Gl / dl + (G - Gl) ** 2 / dr
    gains = np.where(valid, 0.5 * (score - parent_score), -np.inf)
    if lam == 0.0 and np.any(valid & ~np.isfinite(score)):
        raise LeafSolveSingularError("leaf solve singular")
    j = int(np.argmax(gains))
    if not np.isfinite(gains[j]):
        return None
    return float(gains[j]), float(0.5 * (xs[j] + xs[j + 1])), int(cl[j]), int(cr[j])


def _scan_feature_kk(xs, gs, hs, G, H, count, lam, min_leaf, count_scaled, parent_score, k):
    """Best (gain, threshold) along one pre-sorted feature; K > 1 blocks."""
    Gl = np.cumsum(gs, axis=0)[:-1]
    Hl = np.cumsum(hs, axis=0)[:-1]
    cl = np.arange(1, count)
    cr = count - cl
    valid = (xs[1:] > xs[:-1]) & (cl >= min_leaf) & (cr >= min_leaf)
    if not np.any(valid):
        return None
    eye = np.eye(k)
    if count_scaled:
        Al = Hl + cl[:, None, None] * lam * eye
        Ar = (H - Hl) + cr[:, None, None] * lam * eye
    else:
        Al = Hl + lam * eye
        Ar = (H - Hl) + lam * eye
    Gr = G - Gl
    idx = np.flatnonzero(valid)
    try:
        sl = np.linalg.solve(Al[idx], Gl[idx][..., None])[..., 0]
        sr = np.linalg.solve(Ar[idx], Gr[idx][..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        if lam == 0.0:
            raise LeafSolveSingularError("leaf solve singular") from exc
        raise
    score = np.einsum("mj,mj->m", sl, Gl[idx]) + np.einsum("mj,mj->m", sr, Gr[idx])
    gains = 0.5 * (score - parent_score)
    j = int(np.argmax(gains))
    if not np.isfinite(gains[j]):
        return None
    pos = idx[j]
    return (float(gains[j]), float(0.5 * (xs[pos] + xs[pos + 1])),
            int(cl[pos]), int(cr[pos]))


def fit_tree(
    features,
    grads,
    hessians,
    lambda_total: float = 0.0,
    max_depth: int = 4,
    min_samples_leaf: int = 1,
    gain_epsilon: float = GAIN_EPSILON,
    count_scaled_lambda: bool = True,
    diagonal_hessian: bool = False,
    n_threads: int = 1,
) -> Tree:
    """Fit one depth-wise greedy tree to gradients and Hessian blocks.

    ``features`` is (N, q); ``grads`` is (N,) or (N, K); ``hessians`` is
    (N,), (N, K, K), or broadcastable per-sample blocks.  A node stays a leaf
    when no split improves the score by more than ``gain_epsilon``.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, q = X.shape
    if n < 1:
        raise EmptyDatasetError("empty dataset")
    g = np.asarray(grads, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    k = g.shape[1]
    h = np.asarray(hessians, dtype=float)
    if h.ndim == 1:
        h = h[:, None, None]
    if h.shape != (n, k, k):
        raise ValueError(f"hessians must have shape ({n}, {k}, {k})")
    if lambda_total < 0:
        raise ValueError("lambda_total must be nonnegative")
    if diagonal_hessian and k > 1:
        h = np.apply_along_axis(np.diag, -1, np.diagonal(h, axis1=1, axis2=2))

    g1 = g[:, 0] if k == 1 else None
    h1 = h[:, 0, 0] if k == 1 else None

    feature_col = []
    threshold_col = []
    left_col = []
    right_col = []
    value_col = []
    depth_col = []
    count_col = []
    gain_col = []

    pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None

    def parent_score(G, H, count):
        reg = count * lambda_total if count_scaled_lambda else lambda_total
        if k == 1:
            denom = H + reg
            if denom <= 0.0:
                if lambda_total == 0.0:
                    raise LeafSolveSingularError("leaf solve singular")
                return 0.0
            return G * G / denom
        mat = H + reg * np.eye(k)
        try:
            s = np.linalg.solve(mat, G)
        except np.linalg.LinAlgError as exc:
            raise LeafSolveSingularError("leaf solve singular") from exc
        return float(G @ s)

    def best_split(idx, G, H, count):
        ps = parent_score(G, H, count)

        def scan(f):
            x = X[idx, f]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            if k == 1:
                return _scan_feature_k1(
                    xs, g1[idx][order], h1[idx][order], G, H, count,
                    lambda_total, min_samples_leaf, count_scaled_lambda, ps,
                )
            return _scan_feature_kk(
                xs, g[idx][order], h[idx][order], G, H, count,
                lambda_total, min_samples_leaf, count_scaled_lambda, ps, k,
            )

        if pool is not None:
            results = list(pool.map(scan, range(q)))
        else:
            results = [scan(f) for f in range(q)]
        best = None
        for f, res in enumerate(results):  # fixed feature order => determinism
            if res is None:
                continue
            gain, thr, n_left, n_right = res
            if gain <= gain_epsilon:
                continue
            if best is None or gain > best.gain:
                best = SplitCandidate(f, thr, gain, n_left, n_right)
        return best

    def build(idx, depth):
        count = len(idx)
        if k == 1:
            G, H = _aggregate_k1(g1[idx], h1[idx])
        else:
            G = g[idx].sum(axis=0)
            H = h[idx].sum(axis=0)
        cand = None
        if depth < max_depth and count >= 2 * min_samples_leaf:
            cand = best_split(idx, G, H, count)
        node = len(feature_col)
        feature_col.append(-1)
        threshold_col.append(0.0)
        left_col.append(-1)
        right_col.append(-1)
        value_col.append(np.zeros(k))
        depth_col.append(depth)
        count_col.append(count)
        gain_col.append(0.0)
        if cand is None:
            value_col[node] = _leaf_weight(
                G if k > 1 else float(G),
                H if k > 1 else float(H),
                count, lambda_total, count_scaled_lambda, k,
            )
            return node
        feature_col[node] = cand.feature
        threshold_col[node] = cand.threshold
        gain_col[node] = cand.gain
        mask = X[idx, cand.feature] <= cand.threshold
        left_col[node] = build(idx[mask], depth + 1)
        right_col[node] = build(idx[~mask], depth + 1)
        return node

    try:
        build(np.arange(n), 0)
    finally:
        if pool is not None:
            pool.shutdown()

    return Tree(
        feature=np.asarray(feature_col, dtype=int),
        threshold=np.asarray(threshold_col, dtype=float),
        children_left=np.asarray(left_col, dtype=int),
        children_right=np.asarray(right_col, dtype=int),
        leaf_value=np.asarray(value_col, dtype=float),
        depth=np.asarray(depth_col, dtype=int),
        n_features=q,
        output_dim=k,
        max_depth=max_depth,
        leaf_sample_count=np.asarray(count_col, dtype=int),
        gain=np.asarray(gain_col, dtype=float),
    )


def apply(tree: Tree, features) -> np.ndarray:
    """Route samples through the tree; returns the leaf node index per row."""
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    if X.shape[1] != tree.n_features:
        raise ValueError(
            f"feature dimension mismatch: got {X.shape[1]}, tree expects "
            f"{tree.n_features}"
        )
    node = np.zeros(X.shape[0], dtype=int)
    active = tree.feature[node] >= 0
    while np.any(active):
        idx = np.flatnonzero(active)
        cur = node[idx]
        go_left = X[idx, tree.feature[cur]] <= tree.threshold[cur]
        node[idx] = np.where(go_left, tree.children_left[cur], tree.children_right[cur])
        active = tree.feature[node] >= 0
    return node


def predict(tree: Tree, features) -> np.ndarray:
    """Route samples to leaves; returns the (M, K) matrix of leaf weights."""
    return tree.leaf_value[apply(tree, features)].copy()


def scale(tree: Tree, alpha: float) -> Tree:
    """Scale every leaf weight by ``alpha`` (tree families are closed under
    scalar multiplication, which the boosting theory relies on)."""
    return Tree(
        feature=tree.feature.copy(),
        threshold=tree.threshold.copy(),
        children_left=tree.children_left.copy(),
        children_right=tree.children_right.copy(),
        leaf_value=tree.leaf_value * alpha,
        depth=tree.depth.copy(),
        n_features=tree.n_features,
        output_dim=tree.output_dim,
        max_depth=tree.max_depth,
        leaf_sample_count=None if tree.leaf_sample_count is None
        else tree.leaf_sample_count.copy(),
    )


# -- serialization -------------------------------------------------------------
#
# Floats travel as decimal strings produced by repr(); Python guarantees that
# float(repr(x)) == x, so thresholds and weights round-trip to full binary
# precision.


def tree_to_dict(tree: Tree) -> dict:
    nodes = []
    for i in range(tree.n_nodes):
        if tree.is_leaf(i):
            nodes.append({"leaf": [repr(float(v)) for v in tree.leaf_value[i]]})
        else:
            nodes.append(
                {
                    "feature": int(tree.feature[i]),
                    "threshold": repr(float(tree.threshold[i])),
                    "left": int(tree.children_left[i]),
                    "right": int(tree.children_right[i]),
                }
            )
    return {
        "n_features": tree.n_features,
        "output_dim": tree.output_dim,
        "max_depth": tree.max_depth,
        "nodes": nodes,
    }


def tree_from_dict(d: dict) -> Tree:
    nodes = d["nodes"]
    n = len(nodes)
    k = d["output_dim"]
    feature = np.full(n, -1, dtype=int)
    threshold = np.zeros(n)
    left = np.full(n, -1, dtype=int)
    right = np.full(n, -1, dtype=int)
    values = np.zeros((n, k))
    for i, spec in enumerate(nodes):
        if "leaf" in spec:
            values[i] = [float(s) for s in spec["leaf"]]
        else:
            feature[i] = spec["feature"]
            threshold[i] = float(spec["threshold"])
            left[i] = spec["left"]
            right[i] = spec["right"]
    depth = np.zeros(n, dtype=int)
    stack = [(0, 0)]
    while stack:
        i, dep = stack.pop()
        depth[i] = dep
        if feature[i] >= 0:
            stack.append((left[i], dep + 1))
            stack.append((right[i], dep + 1))
    return Tree(
        feature=feature,
        threshold=threshold,
        children_left=left,
        children_right=right,
        leaf_value=values,
        depth=depth,
        n_features=d["n_features"],
        output_dim=k,
        max_depth=d["max_depth"],
    )


def tree_to_json(tree: Tree) -> str:
    return json.dumps(tree_to_dict(tree))


def tree_from_json(s: str) -> Tree:
    return tree_from_dict(json.loads(s))
