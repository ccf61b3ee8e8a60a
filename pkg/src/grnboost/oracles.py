"""Independent brute-force verifiers for the numerical claims the engine
relies on: leaf solves, analytic derivatives, the decrement-dominance
inequalities for cross entropy, drift identities, and the square-root
decrement recursion bound.

None of these share a solve or differentiation code path with the module
they check: the scalar leaf oracle is a golden-section search, the multi-
output one an SVD least-squares solve, derivatives are central differences,
and the recursion bound is simulated directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import hilbert
from .losses import DriftVariant, LossModel, bce as _bce, cce as _cce

__all__ = [
    "OracleReport",
    "drift_identity_check",
    "finite_difference_check",
    "hessian_dominance_sweep",
    "leaf_minimizer_check",
    "numeric_leaf_minimizer",
    "recursion_bound_check",
]


@dataclass
class OracleReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    samples_checked: int
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"{flag:4s}  {self.name:32s} n={self.samples_checked:<6d} "
            f"max_abs={self.max_abs_error:.3e} max_rel={self.max_rel_error:.3e} "
            f"tol={self.tolerance:.1e}"
        )


def numeric_leaf_minimizer(grads, hessians, lambda_total: float = 0.0,
                           count_scaled: bool = True) -> np.ndarray:
    """Minimize the leaf-local quadratic numerically.

    The objective is ``sum_i <g_i, w> + <w, h_i w>/2`` plus the ridge
    ``reg ||w||^2 / 2`` with ``reg = count * lambda`` (or a fixed ``lambda``).
    Scalar leaves use a golden-section search over an adaptively expanded
    bracket; multi-output leaves use an SVD least-squares solve.  Neither
    touches the tree module's Cholesky path.
    """
    g = np.asarray(grads, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    count, k = g.shape
    if count < 1:
        raise ValueError("leaf must be non-empty")
    h = np.asarray(hessians, dtype=float)
    if h.ndim == 1:
        h = h[:, None, None]
    reg = count * lambda_total if count_scaled else lambda_total
    G = g.sum(axis=0)
    H = h.sum(axis=0)

    if k == 1:
        Gs, Hs = float(G[0]), float(H[0, 0]) + reg
        if Hs <= 0.0:
            raise ValueError("leaf quadratic is not positive definite")

        def q(w):
            return Gs * w + 0.5 * Hs * w * w

        b = 10.0
        while not (q(0.0) <= q(-b) and q(0.0) <= q(b)):
            b *= 4.0
            if b > 1e12:
                raise ValueError("leaf minimizer bracket expansion failed")
        res = optimize.minimize_scalar(
            q, bracket=(-b, 0.0, b), method="golden",
            options={"xtol": 1e-13, "maxiter": 20000},
        )
        # golden section is limited to ~sqrt(eps) accuracy by function-value
        # resolution; one parabolic-vertex step from three samples is exact
        # for a quadratic objective up to roundoff
        x1 = float(res.x)
        step_out = max(1e-3, 1e-3 * abs(x1))
        x0, x2 = x1 - step_out, x1 + step_out
        f0, f1, f2 = q(x0), q(x1), q(x2)
        denom = (x1 - x0) * (f1 - f2) - (x1 - x2) * (f1 - f0)
        if denom != 0.0:
            num = (x1 - x0) ** 2 * (f1 - f2) - (x1 - x2) ** 2 * (f1 - f0)
            x1 = x1 - 0.5 * num / denom
        return np.array([x1])

    mat = H + reg * np.eye(k)
    eigs = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if eigs.min() <= 0.0:
        raise ValueError("leaf quadratic is not positive definite")
    w, *_ = np.linalg.lstsq(mat, -G, rcond=None)
    return w


def finite_difference_check(loss: LossModel, n_points: int = 100,
                            step: float = 1e-6, rel_tol: float = 1e-5,
                            seed: int = 0) -> OracleReport:
    """Central-difference comparison of analytic gradients and Hessians at
    random predictions in [-10, 10] with targets valid for the loss kind."""
    if not 1e-8 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-8, 1e-3]")
    rng = np.random.default_rng(np.uint64(seed))
    k = loss.output_dim
    max_abs = 0.0
    max_rel = 0.0
    for _ in range(n_points):
        u = rng.uniform(-10.0, 10.0, size=k)
        if loss.kind == "bce":
            target = float(rng.integers(0, 2))
        elif loss.kind == "cce":
            target = np.zeros(k)
            target[rng.integers(0, k)] = 1.0
        else:
            target = rng.uniform(-10.0, 10.0)
        _, g, H = loss.evaluate(u, target)
        fd_g = np.empty(k)
        fd_H = np.empty((k, k))
        for j in range(k):
            e = np.zeros(k)
            e[j] = step
            vp, gp, _ = loss.evaluate(u + e, target)
            vm, gm, _ = loss.evaluate(u - e, target)
            fd_g[j] = (vp - vm) / (2.0 * step)
            fd_H[:, j] = (gp - gm) / (2.0 * step)
        for a, b in ((g, fd_g), (H, fd_H)):
            diff = np.abs(a - b)
            max_abs = max(max_abs, float(diff.max()))
            max_rel = max(max_rel, float((diff / (1.0 + np.abs(a))).max()))
    return OracleReport(
        name=f"finite_difference[{_loss_label(loss)}]",
        max_abs_error=max_abs,
        max_rel_error=max_rel,
        samples_checked=n_points,
        tolerance=rel_tol,
        passed=max_rel <= rel_tol,
    )


def _loss_label(loss: LossModel) -> str:
    if loss.kind == "drift":
        return f"drift:{loss.drift.name}"
    if loss.kind == "cce":
        return f"cce:K{loss.output_dim}"
    return loss.kind


def recursion_bound_check(alpha0: float, c: float, n_steps: int = 1000) -> OracleReport:
    """Simulate ``a_{k+1} = a_k - c * a_k^{3/2}`` and verify the closed-form
    decay envelopes ``a_k <= ((1/sqrt(a0)) + c k/2)^{-2} <= 4 / (c^2 (k+2)^2)``.
    Requires the feasibility condition ``c * sqrt(a0) <= 1`` (otherwise the
    sequence would go negative in one step)."""
    if alpha0 <= 0 or c <= 0:
        raise ValueError("alpha0 and c must be positive")
    if c * math.sqrt(alpha0) > 1.0 + 1e-12:
        raise ValueError("infeasible: requires c*sqrt(alpha0) <= 1")
    a = alpha0
    worst = -math.inf
    for k in range(n_steps + 1):
        env1 = 1.0 / (1.0 / math.sqrt(alpha0) + 0.5 * c * k) ** 2
        env2 = 4.0 / (c * c * (k + 2) ** 2)
        worst = max(worst, a - env1, env1 - env2, -a)
        a = a - c * a**1.5
    violation = max(0.0, worst)
    return OracleReport(
        name=f"recursion_bound[a0={alpha0:g},c={c:g}]",
        max_abs_error=violation,
        max_rel_error=violation / max(alpha0, 1e-300),
        samples_checked=n_steps + 1,
        tolerance=1e-12,
        passed=violation <= 1e-12,
    )


def _softmax(u):
    s = u - u.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def hessian_dominance_sweep(loss: LossModel, n_points: int = 500,
                            seed: int = 0, empirical_n: int = 64) -> OracleReport:
    """Verify that the exact Newton decrement dominates the loss value.

    Pointwise at random logits: for binary cross entropy the decrement is
    ``g^2/h``; for categorical it is the zero-sum-gauge solve, cross-checked
    against the closed form ``(1-p_t)/p_t``.  A random empirical risk over
    ``empirical_n`` samples is then checked through the block-diagonal exact
    direction: ``||f||_H^2 >= c L(F)``.
    """
    if loss.kind not in ("bce", "cce"):
        raise ValueError("dominance sweep applies to bce/cce only")
    rng = np.random.default_rng(np.uint64(seed))
    k = loss.output_dim
    c = loss.dominance_c or 1.0
    # without ridge the softmax Hessian is singular on the full space, so the
    # solve is gauge-fixed to the zero-sum subspace; with ridge it is regular
    # (and the zero-ridge closed form no longer applies)
    gauge = loss.kind == "cce" and loss.l2_ridge == 0.0
    min_slack = math.inf
    closed_form_dev = 0.0

    for _ in range(n_points):
        u = rng.uniform(-10.0, 10.0, size=k)
        if loss.kind == "bce":
            y = float(rng.integers(0, 2))
            val, g, H = loss.evaluate(u, y)
            dec = float(g[0] ** 2 / H[0, 0])
        else:
            t = int(rng.integers(0, k))
            one_hot = np.zeros(k)
            one_hot[t] = 1.0
            val, g, H = loss.evaluate(u, one_hot)
            f = hilbert.exact_newton_direction(
                hilbert.BlockHessian(H[None]), g[None], 0.0, zero_sum_gauge=gauge
            )[0]
            dec = float(f @ H @ f)
            if gauge:
                p_t = float(_softmax(u)[t])
                closed = (1.0 - p_t) / p_t
                closed_form_dev = max(
                    closed_form_dev, abs(dec - closed) / max(closed, 1e-300)
                )
        min_slack = min(min_slack, dec - c * val)

    # empirical risk over a random prediction field
    u = rng.uniform(-6.0, 6.0, size=(empirical_n, k))
    if loss.kind == "bce":
        targets = rng.integers(0, 2, size=empirical_n).astype(float)
    else:
        targets = rng.integers(0, k, size=empirical_n)
    vals, g, h = loss.evaluate_batch(u, targets)
    f = hilbert.exact_newton_direction(
        hilbert.BlockHessian(h), g, 0.0, zero_sum_gauge=gauge
    )
    dec = hilbert.BlockHessian(h).quad(f)
    emp_slack = float(dec - c * np.mean(vals))

    passed = min_slack > 0.0 and emp_slack > -1e-10
    if gauge:
        passed = passed and closed_form_dev <= 1e-8
    return OracleReport(
        name=f"hessian_dominance[{_loss_label(loss)}]",
        max_abs_error=max(0.0, -min_slack),
        max_rel_error=closed_form_dev,
        samples_checked=n_points + 1,
        tolerance=1e-10,
        passed=passed,
        details={"min_pointwise_slack": float(min_slack),
                 "empirical_slack": emp_slack},
    )


def drift_identity_check(variant: DriftVariant, n_points: int = 200,
                         seed: int = 0) -> OracleReport:
    """Check ``L'(x)/L''(x) = drift(x)`` and convexity ``L''(x) > 0`` at
    random nonzero points in [-5, 5]."""
    rng = np.random.default_rng(np.uint64(seed))
    xs = rng.uniform(-5.0, 5.0, size=n_points)
    xs = xs[xs != 0.0]
    ratio = variant.grad(xs) / variant.hess(xs)
    d = variant.drift(xs)
    err = np.abs(ratio - d)
    rel = err / (1.0 + np.abs(d))
    convex = bool(np.all(variant.hess(xs) > 0.0))
    max_rel = float(rel.max())
    return OracleReport(
        name=f"drift_identity[{variant.name}]",
        max_abs_error=float(err.max()),
        max_rel_error=max_rel,
        samples_checked=len(xs),
        tolerance=1e-8,
        passed=convex and max_rel <= 1e-8,
        details={"convex": convex},
    )


def leaf_minimizer_check(n_cases: int = 200, seed: int = 0,
                         tol: float = 1e-8) -> OracleReport:
    """Compare fitted single-leaf tree weights with the numeric minimizer on
    random leaves (K in {1, 3}, sizes 1..50, lambda in {0, 0.5, 2})."""
    from . import trees  # local import keeps the oracle/tree split visible

    rng = np.random.default_rng(np.uint64(seed))
    lambdas = (0.0, 0.5, 2.0)
    max_abs = 0.0
    for i in range(n_cases):
        k = 1 if i % 2 == 0 else 3
        count = int(rng.integers(1, 51))
        lam = lambdas[i % 3]
        count_scaled = (i % 5 != 0)
        g = rng.normal(0.0, 2.0, size=(count, k))
        if k == 1:
            h = rng.uniform(0.2, 3.0, size=(count, 1, 1))
        else:
            b = rng.normal(size=(count, k, k))
            h = np.einsum("nij,nkj->nik", b, b) / k + 0.3 * np.eye(k)
        w_num = numeric_leaf_minimizer(g, h, lam, count_scaled)
        tree = trees.fit_tree(
            np.zeros((count, 1)), g, h, lam, max_depth=0,
            count_scaled_lambda=count_scaled,
        )
        w_fit = tree.leaf_value[0]
        max_abs = max(max_abs, float(np.abs(w_fit - w_num).max()))
    return OracleReport(
        name="leaf_minimizer",
        max_abs_error=max_abs,
        max_rel_error=max_abs,
        samples_checked=n_cases,
        tolerance=tol,
        passed=max_abs <= tol,
    )
