"""Command-line front end.

Subcommands: ``train``, ``predict``, ``diagnose``, ``lab1d``, ``verify``.
Exit codes: 0 success, 1 oracle verification failure, 2 usage or data error,
3 training completed with a divergence flag (a reportable outcome, not a
crash).

``train`` writes four files into the output directory: ``model.json``,
``metrics.csv`` (fixed column order: k, train_loss, valid_loss, grad_norm,
lambda_k, theta_k, gamma_k, edge_violated, decrement_slack, growth_slack),
``metrics.jsonl`` (one object per iteration with every recorded quantity),
and ``manifest.json`` (resolved configuration, dataset fingerprint, version,
wall-clock per phase, exit status).  Reruns with an identical manifest
reproduce identical metric files for any ``--threads`` value.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, boosting, data_io, losses, oracles
from .boosting import BoostConfig
from .data_io import DataError
from .losses import DriftVariant, LossError

LOSS_CHOICES = ("mse", "bce", "cce", "charbonnier", "logbarrier", "power", "arctan")
SCHEME_ALIASES = {
    "first-order": "first_order",
    "first_order": "first_order",
    "newton": "newton",
    "grn": "grn",
}


class CliError(Exception):
    """Raised for usage/data problems; maps to exit code 2."""

    def __init__(self, category, message):
        super().__init__(f"error: {category}: {message}")


def _build_loss(name: str, ridge: float, power_m: int, n_classes: int):
    if name == "mse":
        return losses.mse(ridge)
    if name == "bce":
        return losses.bce(ridge)
    if name == "cce":
        return losses.cce(n_classes, ridge)
    if name == "charbonnier":
        return losses.charbonnier(ridge)
    if name == "logbarrier":
        return losses.drift_loss(DriftVariant("log_barrier"), ridge)
    if name == "arctan":
        return losses.drift_loss(DriftVariant("arctan"), ridge)
    if name == "power":
        return losses.drift_loss(DriftVariant("power", power_m=power_m), ridge)
    raise CliError("config", f"unknown loss {name!r}")


def _task_for_loss(name: str) -> str:
    return {"bce": "binary", "cce": "multiclass"}.get(name, "regression")


def _load_dataset(args) -> data_io.Dataset:
    spec = args.data
    task = _task_for_loss(args.loss)
    if spec.startswith("synth:"):
        kind = spec.split(":", 1)[1]
        seed = args.data_seed if args.data_seed is not None else args.seed
        try:
            return data_io.synthesize(kind, args.n, args.q, seed,
                                      n_classes=args.classes)
        except DataError as exc:
            raise CliError("data", str(exc)) from exc
    path = Path(spec)
    if not path.exists():
        raise CliError("data", f"no such file: {spec}")
    target = args.target_column
    if target is not None:
        try:
            target = int(target)
        except ValueError:
            pass
    else:
        target = -1
    try:
        return data_io.load_csv(path, has_header=not args.no_header,
                                target_column=target, task=task)
    except DataError as exc:
        raise CliError("data", str(exc)) from exc


def _dataset_fingerprint(ds: data_io.Dataset) -> str:
    hasher = hashlib.sha256()
    hasher.update(np.ascontiguousarray(ds.features).tobytes())
    hasher.update(b"|")
    hasher.update(np.ascontiguousarray(ds.targets).tobytes())
    return hasher.hexdigest()


def _merge_config_file(args, parser):
    """Values explicitly given on the command line win over the config file."""
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError("config", f"cannot read config file: {exc}") from exc
    given = {a.split("=", 1)[0].lstrip("-").replace("-", "_")
             for a in sys.argv if a.startswith("--")}
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise CliError("config", f"unknown config key {key!r}")
        if attr not in given:
            setattr(args, attr, value)
    return args


def cmd_train(args) -> int:
    args_scheme = SCHEME_ALIASES.get(args.scheme)
    if args_scheme is None:
        raise CliError("config", f"unknown scheme {args.scheme!r}")
    t0 = time.perf_counter()
    dataset = _load_dataset(args)
    n_classes = dataset.n_classes if dataset.task == "multiclass" else 0
    try:
        loss = _build_loss(args.loss, args.ridge, args.power_m, n_classes)
    except (ValueError, LossError) as exc:
        raise CliError("config", str(exc)) from exc

    if args.valid_fraction > 0:
        try:
            train_ds, valid_ds = data_io.split(dataset, args.valid_fraction, args.seed)
        except DataError as exc:
            raise CliError("data", str(exc)) from exc
    else:
        train_ds, valid_ds = dataset, None

    try:
        config = BoostConfig(
            scheme=args_scheme,
            eta=args.eta,
            lambda_base=args.lambda_base,
            M=args.M,
            C=args.C,
            n_rounds=args.rounds,
            max_depth=args.depth,
            min_samples_leaf=args.min_samples_leaf,
            diagnostics=args.diagnostics,
            seed=args.seed,
            init=args.init,
            count_scaled_lambda=not args.fixed_lambda,
            n_threads=args.threads,
        )
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    t_load = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        result = boosting.train(train_ds, loss, config, valid_ds)
    except (ValueError, LossError) as exc:
        raise CliError("data", str(exc)) from exc
    t_train = time.perf_counter() - t0

    t0 = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    boosting.save_ensemble(result.ensemble, out / "model.json")
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        boosting.records_to_csv(result.records, fh)
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="") as fh:
        boosting.records_to_jsonl(result.records, fh)
    exit_code = 3 if result.diverged else 0
    manifest = {
        "tool": "grnboost",
        "version": __version__,
        "command": "train",
        "config": {
            "scheme": config.scheme,
            "eta": config.eta,
            "lambda_base": config.lambda_base,
            "M": loss.lipschitz_hessian_M if config.M is None else config.M,
            "C": config.C,
            "rounds": config.n_rounds,
            "depth": config.max_depth,
            "min_samples_leaf": config.min_samples_leaf,
            "diagnostics": config.diagnostics,
            "seed": config.seed,
            "init": config.init,
            "count_scaled_lambda": config.count_scaled_lambda,
            "threads": config.n_threads,
            "valid_fraction": args.valid_fraction,
        },
        "loss": boosting._loss_spec(loss),
        "data": args.data,
        "dataset_fingerprint": _dataset_fingerprint(dataset),
        "n_samples": dataset.n_samples,
        "n_features": dataset.n_features,
        "status": result.status,
        "diverged": result.diverged,
        "rounds_completed": len(result.records),
        "exit_code": exit_code,
        "wall_clock_seconds": {
            "load": round(t_load, 6),
            "train": round(t_train, 6),
            "write": None,  # patched below
        },
    }
    manifest["wall_clock_seconds"]["write"] = round(time.perf_counter() - t0, 6)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    if result.diverged:
        print(f"run diverged after {len(result.records)} rounds "
              f"(status={result.status}); partial metrics in {out}")
    else:
        print(f"trained {len(result.records)} rounds; outputs in {out}")
    return exit_code


def cmd_predict(args) -> int:
    try:
        ensemble = boosting.load_ensemble(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("data", f"cannot load model: {exc}") from exc
    path = Path(args.data)
    if not path.exists():
        raise CliError("data", f"no such file: {args.data}")
    try:
        if args.features_only:
            # whole file is the feature matrix
            import csv as _csv
            with open(path, newline="", encoding="utf-8") as fh:
                rows = [r for r in _csv.reader(fh) if r]
            if args.no_header is False:
                rows = rows[1:]
            X = np.array([[float(c) for c in row] for row in rows])
        else:
            ds = data_io.load_csv(path, has_header=not args.no_header,
                                  target_column=args.target_column or -1,
                                  task="regression")
            X = ds.features
    except (DataError, ValueError) as exc:
        raise CliError("data", str(exc)) from exc
    preds = boosting.predict_ensemble(ensemble, X)
    out = sys.stdout if args.out is None else open(args.out, "w", encoding="utf-8")
    try:
        header = ",".join(f"pred_{i}" for i in range(preds.shape[1]))
        out.write(header + "\n")
        for row in preds:
            out.write(",".join(repr(float(v)) for v in row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _rolling_mean(values, window):
    out = []
    buf = []
    for v in values:
        buf.append(v)
        if len(buf) > window:
            buf.pop(0)
        vals = [x for x in buf if x is not None]
        out.append(sum(vals) / len(vals) if vals else None)
    return out


def cmd_diagnose(args) -> int:
    run = Path(args.run)
    metrics = run / "metrics.jsonl"
    manifest_path = run / "manifest.json"
    if not metrics.exists() or not manifest_path.exists():
        raise CliError("data", f"{run} is not a training run directory")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(metrics, encoding="utf-8") as fh:
        records = boosting.records_from_jsonl(fh)

    have_full = any(r.theta_k is not None for r in records)
    if not have_full:
        if args.data is None:
            raise CliError(
                "data",
                "run lacks full diagnostics; pass --data to retrain in place",
            )
        cfg = manifest["config"]
        loss = boosting.loss_from_spec(manifest["loss"])
        ds_args = argparse.Namespace(
            data=args.data, loss=manifest["loss"]["kind"], seed=cfg["seed"],
            data_seed=None, n=manifest["n_samples"],
            q=manifest["n_features"], classes=manifest["loss"].get("output_dim", 3),
            target_column=None, no_header=False,
        )
        dataset = _load_dataset(ds_args)
        config = BoostConfig(
            scheme=cfg["scheme"], eta=cfg["eta"], lambda_base=cfg["lambda_base"],
            M=cfg["M"], C=cfg["C"], n_rounds=cfg["rounds"], max_depth=cfg["depth"],
            min_samples_leaf=cfg["min_samples_leaf"], diagnostics="full",
            seed=cfg["seed"], init=cfg["init"],
            count_scaled_lambda=cfg["count_scaled_lambda"],
            n_threads=cfg["threads"],
        )
        result = boosting.train(dataset, loss, config)
        records = result.records
        with open(metrics, "w", encoding="utf-8", newline="") as fh:
            boosting.records_to_jsonl(records, fh)

    loss = boosting.loss_from_spec(manifest["loss"])
    cfg = manifest["config"]
    config = BoostConfig(
        scheme=cfg["scheme"], eta=cfg["eta"], lambda_base=cfg["lambda_base"],
        M=cfg["M"], C=cfg["C"], n_rounds=max(cfg["rounds"], 1),
        max_depth=cfg["depth"], diagnostics="full", seed=cfg["seed"],
    )

    thetas = [r.theta_k for r in records]
    gammas = [r.gamma_k for r in records]
    t_roll = _rolling_mean(thetas, args.window)
    g_roll = _rolling_mean(gammas, args.window)

    out_path = run / "diagnostics.csv" if args.out is None else Path(args.out)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("k,theta_k,gamma_k,theta_rolling,gamma_rolling\n")
        for r, tr, gr in zip(records, t_roll, g_roll):
            cells = [str(r.k)] + [
                "" if v is None else repr(float(v))
                for v in (r.theta_k, r.gamma_k, tr, gr)
            ]
            fh.write(",".join(cells) + "\n")

    tally: dict = {}
    for r in records:
        if not r.identity_residuals:
            continue
        for chk in boosting.audit_iteration(r, config, loss):
            ok, total, worst = tally.get(chk.name, (0, 0, float("inf")))
            tally[chk.name] = (ok + int(chk.holds), total + 1, min(worst, chk.slack))
    print(f"rolling window: {args.window}  (series written to {out_path})")
    print(f"{'inequality':24s} {'holds':>12s} {'min slack':>14s}")
    for name, (ok, total, worst) in tally.items():
        print(f"{name:24s} {ok:6d}/{total:<5d} {worst:14.3e}")
    if not tally:
        raise CliError("data", "no audited diagnostics available in this run")
    return 0


def cmd_lab1d(args) -> int:
    try:
        variant = DriftVariant(
            {"charbonnier": "charbonnier", "logbarrier": "log_barrier",
             "log_barrier": "log_barrier", "power": "power",
             "arctan": "arctan"}[args.variant],
            scale=args.scale, power_m=args.power_m,
        )
    except KeyError:
        raise CliError("config", f"unknown variant {args.variant!r}") from None
    scheme = {"newton": "newton", "damped": "damped",
              "damped-newton": "damped", "grn": "grn"}.get(args.scheme)
    if scheme is None:
        raise CliError("config", f"unknown lab scheme {args.scheme!r}")
    result = boosting.newton_1d_lab(
        variant, args.x0, eta=args.eta, scheme=scheme, M=args.M,
        n_steps=args.steps,
    )
    lines = ["k,x,loss,lambda_k"]
    for s in result.steps:
        lines.append(f"{s.k},{s.x!r},{s.loss!r},{s.lambda_k!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    if result.diverged:
        print("# diverged: |x| exceeded 1e100", file=sys.stderr)
    return 0


def _verify_reports(only=None, fd_tolerance=1e-5):
    groups = {
        "fd": lambda: [
            oracles.finite_difference_check(loss, 100, rel_tol=fd_tolerance, seed=i)
            for i, loss in enumerate([
                losses.mse(), losses.bce(), losses.cce(3), losses.charbonnier(),
                losses.drift_loss(DriftVariant("log_barrier")),
                losses.drift_loss(DriftVariant("power", power_m=4)),
                losses.drift_loss(DriftVariant("arctan")),
            ])
        ],
        "dominance": lambda: [
            oracles.hessian_dominance_sweep(losses.bce(), 500, seed=1),
            oracles.hessian_dominance_sweep(losses.cce(2), 500, seed=2),
            oracles.hessian_dominance_sweep(losses.cce(3), 500, seed=3),
            oracles.hessian_dominance_sweep(losses.cce(5), 500, seed=4),
        ],
        "drift": lambda: [
            oracles.drift_identity_check(DriftVariant(name), 200, seed=5)
            for name in ("log_barrier", "charbonnier", "arctan")
        ] + [oracles.drift_identity_check(DriftVariant("power", power_m=m), 200, seed=5)
             for m in (3, 5)],
        "leaf": lambda: [oracles.leaf_minimizer_check(200, seed=6)],
        "recursion": lambda: [
            oracles.recursion_bound_check(a0, c, 1000)
            for a0, c in [(1.0, 1.0), (1.0, 0.1), (0.25, 0.5), (4.0, 0.5),
                          (0.01, 2.0)]
        ],
    }
    names = list(groups) if only is None else [only]
    if only is not None and only not in groups:
        raise CliError("config", f"unknown oracle group {only!r}; "
                                 f"choose from {', '.join(groups)}")
    reports = []
    for name in names:
        reports.extend(groups[name]())
    return reports


def cmd_verify(args) -> int:
    try:
        reports = _verify_reports(args.only, args.tolerance)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    for rep in reports:
        print(rep.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} oracle checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grnboost",
        description="Newton and gradient-regularized Newton boosting with "
                    "convergence diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a boosted ensemble")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--data", required=True,
                   help="CSV path, or synth:<kind> with --n/--q")
    p.add_argument("--loss", default="mse", choices=LOSS_CHOICES)
    p.add_argument("--scheme", default="newton")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--lambda-base", type=float, default=0.0)
    p.add_argument("--M", type=float, default=None,
                   help="Hessian Lipschitz constant for GRN "
                        "(default: the loss model's analytic value)")
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--ridge", type=float, default=0.0,
                   help="per-sample l2 ridge folded into the loss")
    p.add_argument("--diagnostics", default="cheap",
                   choices=("off", "cheap", "full"))
    p.add_argument("--valid-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--n", type=int, default=1000, help="synthetic sample count")
    p.add_argument("--q", type=int, default=8, help="synthetic feature count")
    p.add_argument("--classes", type=int, default=3,
                   help="synthetic multiclass class count")
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--init", default="auto", choices=("auto", "zero"))
    p.add_argument("--fixed-lambda", action="store_true",
                   help="use the fixed-scalar leaf regularization convention "
                        "instead of per-leaf-count scaling")
    p.add_argument("--power-m", type=int, default=3)
    p.add_argument("--target-column", default=None)
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("GRNBOOST_THREADS", "1")))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="apply a saved ensemble")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target-column", default=None)
    p.add_argument("--features-only", action="store_true",
                   help="the CSV has no target column")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="alignment series and inequality audit")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--data", default=None,
                   help="dataset to retrain with full diagnostics if missing")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("lab1d", help="scalar Newton dynamics on drift losses")
    p.add_argument("--variant", default="charbonnier")
    p.add_argument("--x0", type=float, required=True)
    p.add_argument("--scheme", default="newton")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--M", type=float, default=None)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--power-m", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_lab1d)

    p = sub.add_parser("verify", help="run the independent oracle suite")
    p.add_argument("--only", default=None,
                   help="one of: fd, dominance, drift, leaf, recursion")
    p.add_argument("--tolerance", type=float, default=1e-5,
                   help="relative tolerance for the finite-difference oracle")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            args = _merge_config_file(args, parser)
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
