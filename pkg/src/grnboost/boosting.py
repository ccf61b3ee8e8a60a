"""Boosted training loops: first-order, vanilla Newton, and gradient-
regularized Newton (GRN), with per-iteration convergence diagnostics.

All three schemes share the machinery: evaluate per-sample gradients and
Hessian blocks at the current ensemble prediction, fit one tree to the local
(regularized) quadratic, and take the step ``F <- F + eta * tree``.  They
differ only in the effective Hessian and the scalar regularizer:

* ``first_order``  -- identity blocks, ``lam = lambda_base`` (leaf values are
  damped mean gradients),
* ``newton``       -- true blocks, ``lam = lambda_base``,
* ``grn``          -- true blocks, ``lam = lambda_base + C*sqrt(M*||g||)``,
  the adaptive term that makes Newton boosting globally convergent on convex
  losses with Lipschitz Hessians.

With full diagnostics every iteration also records the exact Newton
direction, the Hessian-induced cosine angle against the fitted tree, the weak
gradient edge, and the two sides of the per-iteration decrement and gradient
growth bounds, so the convergence theory can be audited on real runs.

Divergence is an experiment outcome here, not a crash: runs keep going while
the loss grows and only halt (flagged, with partial records) once the loss or
the predictions stop being finite.
"""

from __future__ import annotations

import json
import math
import warnings as _warnings
from dataclasses import dataclass, field

import numpy as np

from . import hilbert, trees
from .data_io import Dataset
from .hilbert import BlockHessian, DegenerateGeometryError, SingularBlockError
from .losses import DriftVariant, LossModel

__all__ = [
    "BoostConfig",
    "Ensemble",
    "InequalityCheck",
    "IterationRecord",
    "Lab1DResult",
    "Lab1DStep",
    "METRIC_COLUMNS",
    "TrainResult",
    "audit_iteration",
    "initial_prediction",
    "load_ensemble",
    "newton_1d_lab",
    "predict_ensemble",
    "records_to_csv",
    "records_to_jsonl",
    "save_ensemble",
    "train",
]

SCHEMES = ("first_order", "newton", "grn")
DIAGNOSTIC_LEVELS = ("off", "cheap", "full")

METRIC_COLUMNS = (
    "k",
    "train_loss",
    "valid_loss",
    "grad_norm",
    "lambda_k",
    "theta_k",
    "gamma_k",
    "edge_violated",
    "decrement_slack",
    "growth_slack",
)


class DiagnosticsUnavailableError(ValueError):
    pass


@dataclass
class BoostConfig:
    scheme: str = "newton"
    eta: float = 1.0
    lambda_base: float = 0.0
    M: float | None = None          # None: take the loss model's constant
    C: float = 1.0
    n_rounds: int = 100
    max_depth: int = 4
    min_samples_leaf: int = 1
    gain_epsilon: float = trees.GAIN_EPSILON
    diagnostics: str = "cheap"
    seed: int = 0
    init: str = "auto"              # "auto" | "zero"
    count_scaled_lambda: bool = True
    diagonal_hessian: bool = False
    n_threads: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0.0 < self.eta <= 2.0:
            raise ValueError("eta must lie in (0, 2]")
        if self.lambda_base < 0:
            raise ValueError("lambda_base must be nonnegative")
        if self.M is not None and self.M < 0:
            raise ValueError("M must be nonnegative")
        if self.C < 1.0:
            raise ValueError("C must be >= 1")
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be nonnegative")
        if self.diagnostics not in DIAGNOSTIC_LEVELS:
            raise ValueError(f"unknown diagnostics level {self.diagnostics!r}")
        if self.init not in ("auto", "zero"):
            raise ValueError("init must be 'auto' or 'zero'")
        if self.n_threads < 1:
            raise ValueError("n_threads must be >= 1")
        if self.scheme == "grn" and self.eta > 1.0:
            _warnings.warn(
                "the global GRN convergence guarantee assumes eta <= 1",
                stacklevel=2,
            )


@dataclass
class IterationRecord:
    k: int
    train_loss: float = math.nan
    valid_loss: float | None = None
    grad_norm: float = math.nan
    lambda_k: float = math.nan
    theta_k: float | None = None
    gamma_k: float | None = None
    edge_violated: bool = False
    decrement_lhs: float | None = None   # L(F_k) - L(F_{k+1})
    decrement_rhs: float | None = None   # (eta - eta^3/3) * lambda_k * ||f_w||^2
    growth_lhs: float | None = None      # ||g_{k+1}||
    growth_rhs: float | None = None      # (1 + eta^2 + eta*sqrt(1-gamma^2)) * ||g_k||
    identity_residuals: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def decrement_slack(self) -> float | None:
        if self.decrement_lhs is None or self.decrement_rhs is None:
            return None
        return self.decrement_lhs - self.decrement_rhs

    @property
    def growth_slack(self) -> float | None:
        if self.growth_lhs is None or self.growth_rhs is None:
            return None
        return self.growth_rhs - self.growth_lhs


@dataclass
class Ensemble:
    initial_prediction: np.ndarray
    trees: list
    etas: list
    loss_kind: str
    output_dim: int
    n_features: int
    loss_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.initial_prediction = np.asarray(self.initial_prediction, dtype=float)

    @property
    def n_rounds(self) -> int:
        return len(self.trees)


@dataclass
class TrainResult:
    ensemble: Ensemble
    records: list
    diverged: bool = False
    status: str = "ok"

    def __iter__(self):  # allow  ensemble, records = train(...)
        return iter((self.ensemble, self.records))


def _loss_spec(loss: LossModel) -> dict:
    spec = {"kind": loss.kind, "l2_ridge": loss.l2_ridge,
            "output_dim": loss.output_dim}
    if loss.drift is not None:
        spec["drift"] = {
            "name": loss.drift.name,
            "scale": loss.drift.scale,
            "power_m": loss.drift.power_m,
        }
    return spec


def loss_from_spec(spec: dict) -> LossModel:
    drift = None
    if spec.get("drift"):
        d = spec["drift"]
        drift = DriftVariant(d["name"], d.get("scale", 1.0), d.get("power_m", 3))
    return LossModel(
        spec["kind"],
        output_dim=spec.get("output_dim", 1),
        l2_ridge=spec.get("l2_ridge", 0.0),
        drift=drift,
    )


def initial_prediction(dataset: Dataset, loss: LossModel, mode: str = "auto") -> np.ndarray:
    """Constant starting prediction: target mean for regression losses, base
    rates on the link scale for cross entropy, or all zeros."""
    k = loss.output_dim
    if mode == "zero":
        return np.zeros(k)
    y = dataset.targets
    if loss.kind == "bce":
        rate = float(np.clip(np.mean(y), 1e-6, 1.0 - 1e-6))
        return np.array([math.log(rate / (1.0 - rate))])
    if loss.kind == "cce":
        freq = np.bincount(y.astype(int), minlength=k) / len(y)
        logf = np.log(np.clip(freq, 1e-6, None))
        return logf - logf.mean()
    return np.array([float(np.mean(y))])


def _check_compat(dataset: Dataset, loss: LossModel):
    if loss.kind == "bce" and dataset.task != "binary":
        raise ValueError("bce loss requires a binary dataset")
    if loss.kind == "cce":
        if dataset.task != "multiclass":
            raise ValueError("cce loss requires a multiclass dataset")
        if dataset.n_classes != loss.output_dim:
            raise ValueError(
                f"cce loss has {loss.output_dim} classes but the dataset has "
                f"{dataset.n_classes}"
            )
    if loss.kind in ("mse", "charbonnier", "drift") and dataset.task == "multiclass":
        raise ValueError(f"{loss.kind} loss cannot train on multiclass targets")


def _exact_direction(hess: BlockHessian, g, zero_sum_gauge: bool, rec: IterationRecord):
    """Unshifted exact Newton direction with the jitter fallback; returns
    None (plus a recorded warning) when the solve stays singular -- a failed
    diagnostic must never abort a training run."""
    try:
        return hilbert.exact_newton_direction(hess, g, 0.0, zero_sum_gauge)
    except SingularBlockError:
        k = hess.output_dim
        jitter = 1e-12 * float(np.trace(hess.blocks.mean(axis=0))) / k
        rec.warnings.append("singular Hessian block; jitter added for diagnostics")
        try:
            return hilbert.exact_newton_direction(
                BlockHessian(hess.blocks, jitter), g, 0.0, zero_sum_gauge
            )
        except SingularBlockError:
            rec.warnings.append("exact Newton direction unavailable")
            return None


def _record_diagnostics(rec, fw, g, h, h_eff, lam, eta, gnorm, full, zero_sum):
    """Fill one record's alignment and decrement measurements (pre-update)."""
    n = fw.shape[0]
    eff_hess = BlockHessian(h_eff)
    true_hess = BlockHessian(h)
    fw_normsq = float(np.sum(fw * fw) / n)
    fw_normsq_K = eff_hess.quad(fw) + lam * fw_normsq
    g_dot_fw = hilbert.hilbert_inner(g, fw)
    rec.identity_residuals = {
        "fw_normsq": fw_normsq,
        "fw_normsq_K": fw_normsq_K,
        "g_dot_fw": g_dot_fw,
        "scalability": abs(g_dot_fw + fw_normsq_K),
        "fw_hnormsq": true_hess.quad(fw),
        "lambda_fw_norm": lam * math.sqrt(fw_normsq),
    }
    rec.decrement_rhs = (eta - eta**3 / 3.0) * lam * fw_normsq
    if gnorm > 0.0:
        gamma, _, violated = hilbert.weak_gradient_edge(fw, true_hess, lam, g)
        rec.gamma_k = gamma
        rec.edge_violated = violated
        rec.growth_rhs = (
            1.0 + eta * eta + eta * math.sqrt(max(0.0, 1.0 - gamma * gamma))
        ) * gnorm
    else:
        rec.warnings.append("zero gradient; edge undefined (converged)")
    if not full:
        return
    f_exact = _exact_direction(true_hess, g, zero_sum, rec)
    if f_exact is None:
        return
    rec.identity_residuals["fexact_hnormsq"] = true_hess.quad(f_exact)
    try:
        rec.theta_k = hilbert.cosine_angle(f_exact, fw, true_hess)
    except DegenerateGeometryError:
        rec.warnings.append("cosine angle undefined")
    if rec.theta_k is not None:
        rec.identity_residuals["theta_identity"] = abs(
            math.sqrt(max(rec.identity_residuals["fw_hnormsq"], 0.0))
            - rec.theta_k
            * math.sqrt(max(rec.identity_residuals["fexact_hnormsq"], 0.0))
        )


def train(dataset: Dataset, loss: LossModel, config: BoostConfig,
          valid: Dataset | None = None) -> TrainResult:
    """Run ``config.n_rounds`` boosting iterations and record diagnostics.

    Returns a :class:`TrainResult`; when the loss or the predictions become
    non-finite (or a leaf Hessian aggregate collapses to singular, which at
    ``lambda = 0`` only happens through divergence-driven underflow) the run
    stops early with ``diverged=True`` and the records gathered so far.
    """
    if dataset.n_samples < 1:
        raise ValueError("dataset is empty")
    _check_compat(dataset, loss)
    X = dataset.features
    y = dataset.targets
    n = dataset.n_samples
    k = loss.output_dim

    F0 = initial_prediction(dataset, loss, config.init)
    P = np.tile(F0, (n, 1))
    Pv = None
    if valid is not None and valid.n_samples:
        Pv = np.tile(F0, (valid.n_samples, 1))

    M = loss.lipschitz_hessian_M if config.M is None else config.M
    eta = config.eta
    full = config.diagnostics == "full"
    cheap_or_full = config.diagnostics in ("cheap", "full")
    zero_sum = loss.kind == "cce"

    ensemble = Ensemble(F0, [], [], loss.kind, k, dataset.n_features,
                        _loss_spec(loss))
    records: list[IterationRecord] = []
    diverged = False
    status = "ok"

    vals, g, h = loss.evaluate_batch(P, y)

    for it in range(config.n_rounds):
        rec = IterationRecord(k=it)
        records.append(rec)
        train_loss = float(np.mean(vals))
        rec.train_loss = train_loss
        if Pv is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                vv, _, _ = loss.evaluate_batch(Pv, valid.targets)
            rec.valid_loss = float(np.mean(vv))
        if not (math.isfinite(train_loss) and np.all(np.isfinite(P))):
            rec.warnings.append("non-finite loss/predictions; run halted")
            diverged, status = True, "diverged"
            break

        gnorm = hilbert.grad_hilbert_norm(g)
        rec.grad_norm = gnorm
        if config.scheme == "grn":
            lam = config.lambda_base + config.C * math.sqrt(M * gnorm)
        else:
            lam = config.lambda_base
        rec.lambda_k = lam

        h_eff = h if config.scheme != "first_order" else np.broadcast_to(
            np.eye(k), (n, k, k)
        )

        try:
            tree = trees.fit_tree(
                X, g, h_eff, lam,
                max_depth=config.max_depth,
                min_samples_leaf=config.min_samples_leaf,
                gain_epsilon=config.gain_epsilon,
                count_scaled_lambda=config.count_scaled_lambda,
                diagonal_hessian=config.diagonal_hessian,
                n_threads=config.n_threads,
            )
        except trees.LeafSolveSingularError:
            rec.warnings.append(
                "singular leaf Hessian aggregate at lambda=0; run halted"
            )
            diverged, status = True, "diverged"
            break

        fw = trees.predict(tree, X)

        if cheap_or_full:
            # diverging runs legitimately push these quantities to inf
            with np.errstate(over="ignore", invalid="ignore"):
                _record_diagnostics(rec, fw, g, h, h_eff, lam, eta, gnorm,
                                    full, zero_sum)

        ensemble.trees.append(tree)
        ensemble.etas.append(eta)
        P = P + eta * fw
        if Pv is not None:
            Pv = Pv + eta * trees.predict(tree, valid.features)

        with np.errstate(over="ignore", invalid="ignore"):
            vals, g, h = loss.evaluate_batch(P, y)
        next_loss = float(np.mean(vals))
        rec.decrement_lhs = train_loss - next_loss
        if cheap_or_full:
            rec.growth_lhs = hilbert.grad_hilbert_norm(g)

    else:
        # loop ran to completion; flag a run that ended in non-finite territory
        if records and not math.isfinite(float(np.mean(vals))):
            records[-1].warnings.append("final loss non-finite; run diverged")
            diverged, status = True, "diverged"

    return TrainResult(ensemble, records, diverged, status)


def predict_ensemble(ensemble: Ensemble, features) -> np.ndarray:
    """Ensemble prediction ``F_0 + sum_t eta_t * tree_t(x)`` as (M, K)."""
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[1] != ensemble.n_features:
        raise ValueError(
            f"features must have shape (M, {ensemble.n_features})"
        )
    out = np.tile(ensemble.initial_prediction, (X.shape[0], 1))
    for tree, eta in zip(ensemble.trees, ensemble.etas):
        out += eta * trees.predict(tree, X)
    return out


# -- inequality audits ----------------------------------------------------------


@dataclass(frozen=True)
class InequalityCheck:
    name: str
    holds: bool
    slack: float


def audit_iteration(record: IterationRecord, config: BoostConfig,
                    loss: LossModel) -> list:
    """Evaluate the per-iteration inequalities the convergence theory
    promises, on one recorded iteration.

    Checks (when the required diagnostics exist on the record):

    * ``grn_decrement``       L(F_k)-L(F_{k+1}) >= (eta - eta^3/3) lam_k ||f_w||^2
    * ``gradient_growth``     ||g_{k+1}|| <= (1 + eta^2 + eta sqrt(1-gamma^2)) ||g_k||
    * ``newton_decrease``     L(F_k)-L(F_{k+1}) >= eta (1 - eta S/(2 mu)) Theta_k^2 ||f_{k+1}||_H^2
    * ``lambda_edge``         lam_k ||f_w|| <= ||g_k||
    * ``scalability_identity``  <g, f_w> + ||f_w||_K^2 = 0

    Each entry carries a signed slack (nonnegative means the inequality
    holds with margin).  Raises when the record carries no diagnostics.
    """
    res = record.identity_residuals
    if not res:
        raise DiagnosticsUnavailableError(
            "record carries no diagnostics; rerun with diagnostics='cheap' or 'full'"
        )
    eta = config.eta
    out = []

    if record.decrement_lhs is not None and record.decrement_rhs is not None:
        if config.scheme == "grn" and eta <= 2.0:
            slack = record.decrement_lhs - record.decrement_rhs
            tol = 1e-9 * max(1.0, abs(record.train_loss))
            out.append(InequalityCheck("grn_decrement", slack >= -tol, slack))

    if (record.gamma_k is not None and not record.edge_violated
            and record.growth_lhs is not None and record.growth_rhs is not None):
        slack = record.growth_rhs - record.growth_lhs
        tol = 1e-8 * max(record.grad_norm, 1e-300)
        out.append(InequalityCheck("gradient_growth", slack >= -tol, slack))

    mu = loss.strong_convexity_mu
    S = loss.smoothness_S
    if (config.scheme == "newton" and mu > 0.0 and eta < 2.0 * mu / S
            and record.theta_k is not None
            and "fexact_hnormsq" in res and record.decrement_lhs is not None):
        rhs = eta * (1.0 - eta * S / (2.0 * mu)) * record.theta_k**2 * res["fexact_hnormsq"]
        slack = record.decrement_lhs - rhs
        out.append(InequalityCheck("newton_decrease", slack >= -1e-9, slack))

    if "lambda_fw_norm" in res and math.isfinite(record.grad_norm):
        slack = record.grad_norm - res["lambda_fw_norm"]
        tol = 1e-8 * max(record.grad_norm, 1e-300)
        out.append(InequalityCheck("lambda_edge", slack >= -tol, slack))

    if "scalability" in res:
        tol = 1e-8 * max(res["fw_normsq_K"], 1e-300)
        slack = tol - res["scalability"]
        out.append(InequalityCheck("scalability_identity", slack >= 0.0, slack))

    return out


# -- scalar Newton lab ------------------------------------------------------------

LAB_SCHEMES = ("newton", "damped", "grn")


@dataclass(frozen=True)
class Lab1DStep:
    k: int
    x: float
    loss: float
    lambda_k: float


@dataclass(frozen=True)
class Lab1DResult:
    steps: list
    diverged: bool

    def xs(self):
        return [s.x for s in self.steps]


def newton_1d_lab(variant: DriftVariant, x0: float, eta: float = 1.0,
                  scheme: str = "newton", M: float | None = None,
                  n_steps: int = 50) -> Lab1DResult:
    """Iterate the scalar Newton-type dynamics on a drift-generated loss.

    * ``newton``: x <- x - drift(x)            (exact recursion of the drift)
    * ``damped``: x <- x - eta * drift(x)
    * ``grn``:    x <- x - eta * L'(x) / (L''(x) + sqrt(M |L'(x)|))

    Halts early once |x| exceeds 1e100 (flagged as diverged).  ``M`` defaults
    to the variant's analytic Hessian-Lipschitz constant.
    """
    if scheme not in LAB_SCHEMES:
        raise ValueError(f"unknown lab scheme {scheme!r}")
    if not (0.0 < eta <= 1.0):
        raise ValueError("eta must lie in (0, 1]")
    if M is None:
        M = variant.lipschitz_hessian_M
    x = float(x0)
    steps = [Lab1DStep(0, x, float(variant.value(x)), 0.0)]
    diverged = False
    for k in range(1, n_steps + 1):
        if scheme == "newton":
            lam = 0.0
            x = float(variant.newton_step(x))
        elif scheme == "damped":
            lam = 0.0
            x = float(variant.damped_newton_step(x, eta))
        else:
            gp = float(variant.grad(x))
            lam = math.sqrt(M * abs(gp))
            x = x - eta * gp / (float(variant.hess(x)) + lam)
        steps.append(Lab1DStep(k, x, float(variant.value(x)), lam))
        if abs(x) > 1e100:
            diverged = True
            break
    return Lab1DResult(steps, diverged)


# -- serialization ---------------------------------------------------------------

ENSEMBLE_FORMAT = "grnboost-ensemble"
ENSEMBLE_VERSION = 1


def save_ensemble(ensemble: Ensemble, path) -> None:
    doc = {
        "format": ENSEMBLE_FORMAT,
        "version": ENSEMBLE_VERSION,
        "loss": ensemble.loss_spec or {"kind": ensemble.loss_kind},
        "output_dim": ensemble.output_dim,
        "n_features": ensemble.n_features,
        "initial_prediction": [repr(float(v)) for v in ensemble.initial_prediction],
        "trees": [
            {"eta": repr(float(eta)), "tree": trees.tree_to_dict(t)}
            for t, eta in zip(ensemble.trees, ensemble.etas)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_ensemble(path) -> Ensemble:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != ENSEMBLE_FORMAT:
        raise ValueError(f"{path}: not a {ENSEMBLE_FORMAT} file")
    if doc.get("version") != ENSEMBLE_VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    tree_list = [trees.tree_from_dict(t["tree"]) for t in doc["trees"]]
    etas = [float(t["eta"]) for t in doc["trees"]]
    return Ensemble(
        initial_prediction=np.array([float(s) for s in doc["initial_prediction"]]),
        trees=tree_list,
        etas=etas,
        loss_kind=doc["loss"]["kind"],
        output_dim=doc["output_dim"],
        n_features=doc["n_features"],
        loss_spec=doc["loss"],
    )


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def record_row(rec: IterationRecord) -> list:
    return [
        _cell(rec.k),
        _cell(rec.train_loss),
        _cell(rec.valid_loss),
        _cell(rec.grad_norm),
        _cell(rec.lambda_k),
        _cell(rec.theta_k),
        _cell(rec.gamma_k),
        _cell(rec.edge_violated),
        _cell(rec.decrement_slack),
        _cell(rec.growth_slack),
    ]


def records_to_csv(records, fh) -> None:
    """Fixed-column CSV stream of iteration records (schema is pinned:
    reorder or rename nothing)."""
    fh.write(",".join(METRIC_COLUMNS) + "\n")
    for rec in records:
        fh.write(",".join(record_row(rec)) + "\n")


def records_to_jsonl(records, fh) -> None:
    """One JSON object per iteration, carrying every recorded quantity."""
    for rec in records:
        doc = {
            "k": rec.k,
            "train_loss": rec.train_loss,
            "valid_loss": rec.valid_loss,
            "grad_norm": rec.grad_norm,
            "lambda_k": rec.lambda_k,
            "theta_k": rec.theta_k,
            "gamma_k": rec.gamma_k,
            "edge_violated": rec.edge_violated,
            "decrement_lhs": rec.decrement_lhs,
            "decrement_rhs": rec.decrement_rhs,
            "decrement_slack": rec.decrement_slack,
            "growth_lhs": rec.growth_lhs,
            "growth_rhs": rec.growth_rhs,
            "growth_slack": rec.growth_slack,
            "identity_residuals": rec.identity_residuals,
            "warnings": rec.warnings,
        }
        fh.write(json.dumps(doc, allow_nan=True) + "\n")


def records_from_jsonl(fh) -> list:
    records = []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        doc = json.loads(line)
        rec = IterationRecord(
            k=doc["k"],
            train_loss=doc["train_loss"],
            valid_loss=doc["valid_loss"],
            grad_norm=doc["grad_norm"],
            lambda_k=doc["lambda_k"],
            theta_k=doc["theta_k"],
            gamma_k=doc["gamma_k"],
            edge_violated=doc["edge_violated"],
            decrement_lhs=doc["decrement_lhs"],
            decrement_rhs=doc["decrement_rhs"],
            growth_lhs=doc["growth_lhs"],
            growth_rhs=doc["growth_rhs"],
            identity_residuals=doc.get("identity_residuals", {}),
            warnings=doc.get("warnings", []),
        )
        records.append(rec)
    return records
