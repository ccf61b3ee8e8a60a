"""Geometry of the empirical prediction space.

Predictions, gradients, and update directions over ``N`` training samples
with ``K`` outputs live in ``R^{N x K}`` equipped with the averaged inner
product ``<a, b> = (1/N) sum_i <a_i, b_i>``.  The risk Hessian acts
block-diagonally, one symmetric ``K x K`` block per sample, so exact Newton
directions reduce to per-sample solves.

This module provides those solves (with an optional scalar shift and a
zero-sum gauge for softmax blocks), the Hessian-induced inner product, and
the two alignment diagnostics between a weak update and the exact one: the
Hessian-induced cosine angle and the weak gradient edge.

All reductions use numpy's fixed-order pairwise summation over arrays in
sample order, so results are identical no matter how callers partition work
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BlockHessian",
    "DegenerateGeometryError",
    "SingularBlockError",
    "cosine_angle",
    "exact_newton_direction",
    "grad_hilbert_norm",
    "hessian_inner",
    "hessian_norm",
    "hilbert_inner",
    "weak_gradient_edge",
]


class SingularBlockError(ValueError):
    """A per-sample Hessian block is singular and no shift was applied."""


class DegenerateGeometryError(ValueError):
    """An angle or edge is undefined (zero norm in the relevant metric)."""


def _as_field(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("prediction fields must have shape (N, K)")
    return a


def _as_blocks(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h[:, None, None]
    if h.ndim != 3 or h.shape[1] != h.shape[2]:
        raise ValueError("hessian blocks must have shape (N, K, K)")
    return h


@dataclass(frozen=True)
class BlockHessian:
    """Block-diagonal Hessian: one symmetric ``K x K`` block per sample,
    plus an optional scalar shift ``lam`` standing for ``H + lam*I``."""

    blocks: np.ndarray
    shift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "blocks", _as_blocks(self.blocks))
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")

    @property
    def n_samples(self) -> int:
        return self.blocks.shape[0]

    @property
    def output_dim(self) -> int:
        return self.blocks.shape[1]

    def apply(self, u) -> np.ndarray:
        """(H + shift*I) u, per sample."""
        u = _as_field(u)
        out = np.einsum("nij,nj->ni", self.blocks, u)
        if self.shift:
            out = out + self.shift * u
        return out

    def quad(self, u) -> float:
        """<u, (H + shift*I) u> in the averaged inner product."""
        return hilbert_inner(u, self.apply(u))

    def shifted(self, lam: float) -> "BlockHessian":
        return BlockHessian(self.blocks, self.shift + lam)


def hilbert_inner(a, b) -> float:
    """Averaged inner product ``(1/N) sum_i <a_i, b_i>``."""
    a = _as_field(a)
    b = _as_field(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b) / a.shape[0])


def grad_hilbert_norm(g) -> float:
    """Norm ``sqrt((1/N) sum_i ||g_i||^2)`` of a gradient field."""
    g = _as_field(g)
    return float(np.sqrt(np.sum(g * g) / g.shape[0]))


def hessian_inner(a, b, hess: BlockHessian) -> float:
    """Hessian-induced inner product ``<a, (H + shift*I) b>``."""
    return hilbert_inner(a, hess.apply(b))


def hessian_norm(a, hess: BlockHessian) -> float:
    q = hessian_inner(a, a, hess)
    return float(np.sqrt(max(q, 0.0)))


def _zero_sum_basis(k: int) -> np.ndarray:
    """Orthonormal basis of the zero-sum subspace {v : sum(v) = 0} in R^k."""
    # Helmert-style rows, transposed to columns
    b = np.zeros((k, k - 1))
    for j in range(1, k):
        b[:j, j - 1] = 1.0
        b[j, j - 1] = -j
        b[:, j - 1] /= np.sqrt(j * (j + 1))
    return b


def exact_newton_direction(
    hess: BlockHessian,
    g,
    shift: float = 0.0,
    zero_sum_gauge: bool = False,
) -> np.ndarray:
    """Per-sample solve ``f_i = -(h_i + shift*I)^{-1} g_i``.

    With ``shift = 0`` every block must be invertible; softmax blocks are
    singular along the all-ones direction, so pass ``zero_sum_gauge=True`` to
    solve the reduced system on {v : sum(v) = 0} instead (the gradient of
    cross entropy already lies in that subspace, and the induced decrement is
    gauge-invariant).

    Raises :class:`SingularBlockError` when an unshifted block cannot be
    solved.
    """
    g = _as_field(g)
    blocks = hess.blocks
    if g.shape[0] != blocks.shape[0] or g.shape[1] != blocks.shape[1]:
        raise ValueError("gradient and hessian shapes disagree")
    total_shift = hess.shift + shift
    n, k = g.shape

    if k == 1:
        denom = blocks[:, 0, 0] + total_shift
        bad = ~np.isfinite(denom) | (denom <= 0.0)
        if np.any(bad) and total_shift == 0.0:
            raise SingularBlockError("Newton direction undefined: singular block")
        if np.any(bad):
            raise SingularBlockError("shifted block not positive")
        return -(g[:, 0] / denom)[:, None]

    if zero_sum_gauge and total_shift == 0.0:
        basis = _zero_sum_basis(k)
        reduced = np.einsum("ia,nij,jb->nab", basis, blocks, basis)
        rhs = -g @ basis
        try:
            w = np.linalg.solve(reduced, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularBlockError(
                "Newton direction undefined: singular reduced block"
            ) from exc
        return w @ basis.T

    mats = blocks
    if total_shift:
        mats = blocks + total_shift * np.eye(k)
    try:
        f = np.linalg.solve(mats, -g[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularBlockError("Newton direction undefined: singular block") from exc
    if not np.all(np.isfinite(f)):
        raise SingularBlockError("Newton direction undefined: singular block")
    return f


def cosine_angle(exact, weak, hess: BlockHessian) -> float:
    """Cosine of the angle between the exact and weak directions in the
    Hessian-induced inner product (computed with the *unshifted* blocks).

    Returns the raw signed value, clamped to [-1, 1] only to absorb roundoff;
    a negative result means the weak learner points against the exact
    direction, which callers may want to surface rather than hide.
    """
    unshifted = BlockHessian(hess.blocks, 0.0)
    ne = hessian_norm(exact, unshifted)
    nw = hessian_norm(weak, unshifted)
    if ne <= 0.0 or nw <= 0.0:
        raise DegenerateGeometryError("angle undefined: zero Hessian norm")
    raw = hessian_inner(exact, weak, unshifted) / (ne * nw)
    return float(np.clip(raw, -1.0, 1.0))


def weak_gradient_edge(weak, hess: BlockHessian, lambda_k: float, g):
    """Implied weak gradient and the edge it certifies.

    The weak update behaves as if it solved the shifted Newton system for
    ``g_w = -(H + lambda_k I) f_w``.  The edge ``gamma`` is defined through
    ``||g_w - g||^2 <= (1 - gamma^2) ||g||^2``; when the mismatch exceeds
    ``||g||`` the edge is violated and ``gamma`` is reported as 0.0 with the
    violation flag set.

    Returns ``(gamma, implied_gradient, edge_violated)``.
    """
    g = _as_field(g)
    weak = _as_field(weak)
    gn2 = np.sum(g * g)
    if gn2 <= 0.0:
        raise DegenerateGeometryError("edge undefined: zero gradient (converged)")
    shifted = BlockHessian(hess.blocks, hess.shift + lambda_k)
    gw = -shifted.apply(weak)
    diff2 = np.sum((gw - g) ** 2)
    ratio = diff2 / gn2
    violated = bool(ratio > 1.0)
    gamma = float(np.sqrt(max(0.0, 1.0 - ratio)))
    return gamma, gw, violated
