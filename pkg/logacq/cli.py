"""
Command Line
============
`python -m logacq <subcommand>`:

    bench           run the BO loop and write CSV + config
    gradfrac        vanishing-gradient table on Ackley
    acq-eval        acquisition value and gradient at a point for a saved model
    verify-oracles  re-check the special-function fixture
    summarize       mean ± 2 standard errors of best-so-far per iteration

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np
import orjson
import torch
from pydantic import ValidationError

from . import harness
from .acq_analytic import AnalyticAcquisition, IncumbentState
from .acq_mc import MCAcquisition, Temperatures
from .acq_mohv import EHVIAcquisition, box_decompose, default_upper_bound, pareto_filter
from .errors import ConfigError, LogAcqError
from .settings import DTYPE, ORACLE_PATH, RESULTS_DIR, configure_logging
from .surrogate import VARIANCE_FLOOR, ModelList, load_model_record
from .testbed import PROBLEM_NAMES, get_problem

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# CLI flag dest -> (section, RunConfig field); section None means top level
RUN_FLAGS = {
    "problem": (None, "problem"),
    "acquisition": (None, "acquisition"),
    "q": (None, "q"),
    "iterations": (None, "iterations"),
    "n_init": (None, "n_init"),
    "replicates": (None, "replicates"),
    "seed": (None, "seed"),
    "noise_fraction": (None, "noise_fraction"),
    "fat": (None, "fat"),
    "log_expected": (None, "log_expected"),
    "mc_samples": (None, "mc_samples"),
    "beta": (None, "beta"),
    "out": (None, "out"),
    "jobs": (None, "jobs"),
    "save_models": (None, "save_models"),
    "record_timing": (None, "record_timing"),
    "tau_0": ("temps", "tau_0"),
    "tau_max": ("temps", "tau_max"),
    "tau_cons": ("temps", "tau_cons"),
    "n_restarts": ("optim", "n_restarts"),
    "raw_candidates": ("optim", "raw_candidates"),
    "init_strategy": ("optim", "init_strategy"),
    "max_iters": ("optim", "max_iters"),
    "grad_tol": ("optim", "grad_tol"),
    "mode": ("optim", "mode"),
}


def _epilog() -> str:
    return (
        "problems:     " + ", ".join(PROBLEM_NAMES) + "\n"
        "acquisitions: " + ", ".join(harness.ACQUISITIONS) + "\n\n"
        "exit codes: 0 success, 1 runtime failure, 2 usage/config error"
    )


def _echo(payload: dict) -> None:
    print(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS).decode())


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from e


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


# ==================== bench ====================

def _overrides(args: argparse.Namespace) -> dict:
    """Flags the user actually passed, nested the way RunConfig nests them."""
    out: dict = {}
    for dest, (section, field_name) in RUN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            out[field_name] = value
        else:
            out.setdefault(section, {})[field_name] = value
    return out


def resolve_run_config(args: argparse.Namespace) -> harness.RunConfig:
    overrides = _overrides(args)
    acquisition = overrides.get("acquisition")
    if acquisition is not None and acquisition not in harness.ACQUISITIONS:
        raise ConfigError(f"unknown acquisition '{acquisition}'; registered: {', '.join(harness.ACQUISITIONS)}")
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        config = harness.load_run_config(args.config, overrides)
    else:
        missing = [f for f in ("problem", "acquisition") if f not in overrides]
        if missing:
            raise ConfigError(f"missing required flag(s): {', '.join('--' + m for m in missing)}")
        config = harness.RunConfig(**overrides)
    if config.out is None:
        config = config.model_copy(update={
            "out": os.path.join(RESULTS_DIR, f"{config.problem}_{config.acquisition}.csv"),
        })
    return config


def cmd_bench(args: argparse.Namespace) -> int:
    config = resolve_run_config(args)
    _echo(config.model_dump())
    records = harness.run_bo(config)
    failed = sum(r.phase == "failed" for r in records)
    logger.info("wrote %d records to %s (%d failed replicates)", len(records), config.out, failed)
    return EXIT_OK


# ==================== gradfrac ====================

def cmd_gradfrac(args: argparse.Namespace) -> int:
    resolved = {
        "dims": args.dims, "ns": args.ns, "replicates": args.replicates, "seed": args.seed,
        "test_points": args.test_points, "threshold": args.threshold, "out": args.out,
    }
    _echo(resolved)
    rows = harness.grad_vanish_experiment(
        args.dims, args.ns, replicates=args.replicates, seed=args.seed,
        n_test=args.test_points, threshold=args.threshold,
    )
    directory = os.path.dirname(args.out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    harness.write_gradfrac(rows, args.out)
    for row in harness.aggregate_gradfrac(rows):
        print(f"d={row['d']:<3d} n={row['n']:<4d} {row['acquisition']:<6s} fraction={row['fraction']:.4f}")
    return EXIT_OK


# ==================== acq-eval ====================

def _incumbent(model: ModelList) -> IncumbentState:
    outputs = model.data.outputs
    feasible = None
    if model.num_outputs > 1:
        # constraint columns keep the sign of the raw constraint value
        feasible = (model.data.raw_outputs()[:, 1:] <= 0).all(dim=-1)
    return IncumbentState.from_outputs(outputs[:, 0], feasible)


def _build_eval_acquisition(args: argparse.Namespace, model: ModelList, record: dict):
    family = harness.ACQUISITIONS.get(args.acq)
    if family is None:
        raise ConfigError(f"unknown acquisition '{args.acq}'; registered: {', '.join(harness.ACQUISITIONS)}")
    temps = Temperatures(tau_0=args.tau_0, tau_max=args.tau_max, tau_cons=args.tau_cons)
    if family == "ehvi":
        if args.ref_point is not None:
            ref = np.asarray(args.ref_point, dtype=np.float64)
        elif "problem" in record:
            ref = get_problem(record["problem"]).ref_point
        else:
            raise ConfigError("hypervolume acquisitions need --ref-point or a model record with a problem name")
        Y = model.data.raw_outputs()[:, :2].numpy()
        frontier = pareto_filter(Y, ref)
        decomposition = box_decompose(frontier, default_upper_bound(Y, ref), ref)
        return EHVIAcquisition(model, args.acq, frontier, decomposition, temps, args.seed, not args.canonical, num_samples=args.mc_samples)
    incumbent = _incumbent(model)
    if args.y_star is not None:
        incumbent = IncumbentState(float(model.data.standardize(args.y_star, 0)))
    if family == "analytic":
        return AnalyticAcquisition(model, args.acq, incumbent, beta=args.beta)
    return MCAcquisition(model, args.acq, incumbent, temps, args.seed, not args.canonical, args.mc_samples)


def cmd_acq_eval(args: argparse.Namespace) -> int:
    if not os.path.exists(args.model):
        raise ConfigError(f"model record not found: {args.model}")
    record = load_model_record(args.model)
    model = ModelList.from_record(record)
    if not args.x:
        raise ConfigError("at least one --x point is required")
    X = torch.tensor(args.x, dtype=DTYPE)
    if X.shape[-1] != model.d:
        raise ConfigError(f"points have {X.shape[-1]} coordinates, model has {model.d}")
    X.requires_grad_(True)

    acq = _build_eval_acquisition(args, model, record)
    value = acq(X)
    (grad,) = torch.autograd.grad(value, X)

    posteriors = []
    with torch.no_grad():
        for m, gp in enumerate(model.models):
            post = gp.posterior(X.detach())
            variance = post.variance
            floored = variance < VARIANCE_FLOOR
            if bool(floored.any()):
                logger.warning("output %d: posterior variance below %.0e, sigma floored to 1e-12", m, VARIANCE_FLOOR)
            posteriors.append({
                "output": m,
                "mean": post.mean.tolist(),
                "sigma": torch.sqrt(variance.clamp_min(VARIANCE_FLOOR)).tolist(),
                "sigma_floored": floored.tolist(),
            })

    _echo({
        "model": args.model,
        "acquisition": args.acq,
        "x": X.detach().tolist(),
        "value": float(value),
        "gradient": grad.tolist(),
        "posterior": posteriors,
    })
    return EXIT_OK


# ==================== verify-oracles ====================

def cmd_verify_oracles(args: argparse.Namespace) -> int:
    from .stable_math import verify_oracles

    if not os.path.exists(args.path):
        raise ConfigError(f"oracle fixture not found: {args.path}")
    try:
        report = verify_oracles(args.path, rel_tol=args.rel_tol, log_h_mid_tol=args.log_h_mid_tol)
    except ValueError as e:
        raise ConfigError(f"malformed oracle fixture: {e}") from e
    for name in sorted(report.counts):
        print(f"{name:<12s} rows={report.counts[name]:<4d} max_rel_error={report.max_rel_error[name]:.3e}")
    if report.ok:
        print("all rows within tolerance")
        return EXIT_OK
    for row in report.failures:
        print(f"FAIL {row.function}({row.x!r}) = {row.value!r}, reference {row.reference!r}, rel. error {row.rel_error:.3e} > {row.tolerance:.0e}")
    return EXIT_FAILURE


# ==================== summarize ====================

def _run_label(path: str) -> tuple[str, Optional[harness.RunConfig]]:
    config_path = f"{path}.config.json"
    if os.path.exists(config_path):
        config = harness.load_run_config(config_path)
        return config.acquisition, config
    return os.path.splitext(os.path.basename(path))[0], None


def cmd_summarize(args: argparse.Namespace) -> int:
    runs = {}
    optimum = args.optimum
    for path in args.results:
        if not os.path.exists(path):
            raise ConfigError(f"results file not found: {path}")
        label, config = _run_label(path)
        if label in runs:
            label = f"{label}:{os.path.basename(path)}"
        runs[label] = harness.read_results(path)
        if optimum is None and config is not None:
            known = get_problem(config.problem).known_optimum
            optimum = known.value if known is not None else None
    rows = harness.summarize_results(runs, optimum)
    if args.out:
        harness.write_summary(rows, args.out)
    for r in rows:
        regret = "" if r.mean_regret is None else f" regret={r.mean_regret:.6g}"
        print(f"{r.label:<12s} iter={r.iteration:<4d} n={r.replicates:<3d} best={r.mean_best:.6g} ±{r.se2_best:.3g}{regret}")
    return EXIT_OK


# ==================== Parser ====================

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="persisted RunConfig JSON; other flags override its fields")
    p.add_argument("--problem", help="problem name, e.g. ackley16")
    p.add_argument("--acquisition", "--acq", dest="acquisition", help="acquisition name")
    p.add_argument("--q", type=int, help="batch size")
    p.add_argument("--iterations", "--iters", dest="iterations", type=int, help="BO iterations after the initial design")
    p.add_argument("--n-init", dest="n_init", type=int, help="initial design size (default 2d)")
    p.add_argument("--replicates", "--reps", dest="replicates", type=int, help="number of replicates")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--noise-fraction", "--noise", dest="noise_fraction", type=float, help="noise std as a share of the objective range")
    p.add_argument("--canonical", dest="fat", action="store_const", const=False, help="softplus/logsumexp/logsigmoid instead of the fat-tailed forms")
    p.add_argument("--log-expected", dest="log_expected", action="store_const", const=True, help="qLogEHVI: mean of per-draw log-HVI")
    p.add_argument("--mc-samples", dest="mc_samples", type=int, help="posterior draws (default depends on q)")
    p.add_argument("--beta", type=float, help="UCB exploration weight")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--jobs", type=int, help="parallel replicate processes")
    p.add_argument("--save-models", dest="save_models", action="store_const", const=True, help="write the last model of each replicate")
    p.add_argument("--record-timing", dest="record_timing", action="store_const", const=True, help="fill wall_ms (makes output time-dependent)")
    p.add_argument("--tau0", dest="tau_0", type=float, help="softplus temperature")
    p.add_argument("--tau-max", dest="tau_max", type=float, help="smooth-max temperature")
    p.add_argument("--tau-cons", dest="tau_cons", type=float, help="constraint sigmoid temperature")
    p.add_argument("--restarts", dest="n_restarts", type=int, help="optimizer restarts")
    p.add_argument("--raw-candidates", dest="raw_candidates", type=int, help="Boltzmann pool size")
    p.add_argument("--init-strategy", dest="init_strategy", choices=["uniform", "boltzmann"], help="restart initialization")
    p.add_argument("--max-iters", dest="max_iters", type=int, help="L-BFGS-B iterations per restart")
    p.add_argument("--grad-tol", dest="grad_tol", type=float, help="projected-gradient tolerance")
    p.add_argument("--mode", choices=["joint", "sequential_greedy"], help="batch construction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="logacq",
        description="Log-space improvement acquisitions for Bayesian optimization",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run the BO loop", epilog=_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_run_flags(bench)
    bench.set_defaults(handler=cmd_bench)

    grad = sub.add_parser("gradfrac", help="vanishing-gradient fractions on Ackley")
    grad.add_argument("--dims", type=_ints, default=[2, 8, 16], help="comma-separated dimensions")
    grad.add_argument("--ns", type=_ints, default=[10, 20, 40, 80], help="comma-separated training-set sizes")
    grad.add_argument("--replicates", "--reps", dest="replicates", type=int, default=1)
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--test-points", dest="test_points", type=int, default=harness.GRADFRAC_TEST_POINTS)
    grad.add_argument("--threshold", type=float, default=harness.GRADFRAC_THRESHOLD, help="gradient-norm threshold")
    grad.add_argument("--out", default=os.path.join(RESULTS_DIR, "gradfrac.csv"))
    grad.set_defaults(handler=cmd_gradfrac)

    ev = sub.add_parser("acq-eval", help="evaluate an acquisition for a saved model", epilog=_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    ev.add_argument("--model", required=True, help="model record JSON")
    ev.add_argument("--acq", required=True, help="acquisition name")
    ev.add_argument("--x", type=_floats, action="append", help="candidate point (repeat for a batch)")
    ev.add_argument("--y-star", dest="y_star", type=float, help="incumbent on the raw scale (default: best observed)")
    ev.add_argument("--ref-point", dest="ref_point", type=_floats, help="hypervolume reference point")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--mc-samples", dest="mc_samples", type=int)
    ev.add_argument("--beta", type=float, default=2.0)
    ev.add_argument("--canonical", action="store_true")
    ev.add_argument("--tau0", dest="tau_0", type=float, default=1e-6)
    ev.add_argument("--tau-max", dest="tau_max", type=float, default=1e-2)
    ev.add_argument("--tau-cons", dest="tau_cons", type=float, default=1e-2)
    ev.set_defaults(handler=cmd_acq_eval)

    ver = sub.add_parser("verify-oracles", help="check special functions against the fixture")
    ver.add_argument("--path", default=ORACLE_PATH)
    ver.add_argument("--rel-tol", dest="rel_tol", type=float, default=1e-12)
    ver.add_argument("--log-h-mid-tol", dest="log_h_mid_tol", type=float, default=1e-9)
    ver.set_defaults(handler=cmd_verify_oracles)

    summ = sub.add_parser("summarize", help="mean ± 2 SE of best-so-far per iteration")
    summ.add_argument("results", nargs="+", help="CSV files written by bench")
    summ.add_argument("--optimum", type=float, help="known optimum for regret (default: from the run config)")
    summ.add_argument("--out", help="summary CSV path")
    summ.set_defaults(handler=cmd_summarize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.log_level)

    try:
        return args.handler(args)
    except ValidationError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except LogAcqError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
