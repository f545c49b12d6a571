"""
Harness
=======
Experiment drivers: the closed Bayesian-optimization loop, the
vanishing-gradient diagnostic, result persistence (CSV + JSON run config)
and the mean ± 2 standard-error summary.

Every replicate owns its seeds, derived from (master seed, replicate index),
so replicates can run in any order or in parallel without changing each
other's records.
"""

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Literal, Optional, Sequence

import numpy as np
import orjson
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.stats import qmc

from .acq_analytic import AnalyticAcquisition, IncumbentState
from .acq_mc import MCAcquisition, Temperatures
from .acq_mohv import MAX_SUBSET_Q, EHVIAcquisition, box_decompose, default_upper_bound, hypervolume, pareto_filter
from .acq_opt import OptimConfig, optimize_acq
from .errors import ConfigError, FitError, LogAcqError
from .settings import DTYPE, FIT_RESTARTS
from .surrogate import DataSet, GPModel, ModelList, default_hyperparams, save_model
from .testbed import Ackley, Problem, bilog, get_problem

logger = logging.getLogger(__name__)

# name -> family; the family decides how the acquisition is built
ACQUISITIONS = {
    "ei": "analytic",
    "logei": "analytic",
    "pi": "analytic",
    "logpi": "analytic",
    "ucb": "analytic",
    "cei": "analytic",
    "logcei": "analytic",
    "qei": "mc",
    "qlogei": "mc",
    "qlogcei": "mc",
    "qlognei": "mc",
    "qehvi": "ehvi",
    "qlogehvi": "ehvi",
}
CONSTRAINED_ACQUISITIONS = ("cei", "logcei", "qlogcei")

# Gradient-vanishing diagnostic
DGP_UNIFORM_SHARE = 0.8
DGP_CLUSTER_STD = 0.25
GRADFRAC_TEST_POINTS = 2000
GRADFRAC_THRESHOLD = 1e-10

# added to the fit seed for the single retry after a failed fit
FIT_RETRY_OFFSET = 104729

CSV_TAIL = ["best", "acq_value", "zero_grad_restarts", "wall_ms", "seed"]


# ==================== Run Configuration ====================

class RunConfig(BaseModel):
    """One benchmark run: a problem, an acquisition and the loop budget."""

    model_config = ConfigDict(extra="forbid")

    problem: str
    acquisition: str
    q: int = Field(default=1, ge=1)
    iterations: int = Field(default=50, ge=0)
    n_init: Optional[int] = Field(default=None, ge=1)
    replicates: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    noise_fraction: float = Field(default=0.0, ge=0)
    temps: Temperatures = Field(default_factory=Temperatures)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    fat: bool = True
    log_expected: bool = False
    mc_samples: Optional[int] = Field(default=None, ge=1)
    beta: float = Field(default=2.0, ge=0)
    out: Optional[str] = None
    jobs: int = Field(default=1, ge=1)
    save_models: bool = False
    record_timing: bool = False

    @field_validator("acquisition")
    @classmethod
    def check_acquisition(cls, v: str) -> str:
        if v not in ACQUISITIONS:
            raise ValueError(f"unknown acquisition '{v}'; registered: {', '.join(ACQUISITIONS)}")
        return v

    @field_validator("problem")
    @classmethod
    def check_problem(cls, v: str) -> str:
        get_problem(v)
        return v

    @model_validator(mode="after")
    def check_combination(self) -> "RunConfig":
        problem = get_problem(self.problem)
        family = ACQUISITIONS[self.acquisition]
        if family == "analytic" and self.q > 1:
            raise ValueError(f"{self.acquisition} is analytic and only supports q = 1")
        if problem.is_multi_objective and family != "ehvi":
            raise ValueError(f"{self.problem} is bi-objective; use one of qehvi, qlogehvi")
        if family == "ehvi" and not problem.is_multi_objective:
            raise ValueError(f"{self.acquisition} needs a bi-objective problem")
        if family == "ehvi" and self.q > MAX_SUBSET_Q:
            raise ValueError(f"hypervolume acquisitions support q <= {MAX_SUBSET_Q}")
        if problem.num_constraints and self.acquisition not in CONSTRAINED_ACQUISITIONS:
            raise ValueError(f"{self.problem} has constraints; use one of {', '.join(CONSTRAINED_ACQUISITIONS)}")
        if self.n_init is None:
            self.n_init = 2 * problem.dim
        return self


def save_run_config(config: RunConfig, path: str) -> None:
    try:
        with open(path, "wb") as f:
            f.write(orjson.dumps(config.model_dump(), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
    except OSError as e:
        raise OSError(f"cannot write run config {path}: {e}") from e


def load_run_config(path: str, overrides: Optional[dict] = None) -> RunConfig:
    """Read a persisted RunConfig; `overrides` replace individual fields before validation."""
    try:
        with open(path, "rb") as f:
            data = orjson.loads(f.read())
    except OSError as e:
        raise OSError(f"cannot read run config {path}: {e}") from e
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return RunConfig(**data)


# ==================== Records ====================

class TrialRecord(BaseModel):
    """
    One evaluated point. A batch of q candidates produces q records sharing
    the iteration number; `best` is computed from noiseless values.
    """

    replicate: int
    iteration: int
    phase: Literal["init", "bo", "failed"]
    x: list[float]
    y: list[float]
    best: float
    acq_value: float = math.nan
    zero_grad_restarts: int = 0
    wall_ms: float = 0.0
    seed: int = 0


def replicate_seeds(master: int, replicate: int) -> dict[str, int]:
    state = np.random.SeedSequence([master, replicate]).generate_state(4, dtype=np.uint32)
    return {"design": int(state[0]), "noise": int(state[1]), "fit": int(state[2]), "acq": int(state[3])}


def _iteration_seed(base: int, t: int) -> int:
    return (base + t) % (2 ** 31)


def initial_design(dim: int, n: int, seed: int) -> np.ndarray:
    """First n points of a scrambled Sobol sequence."""
    m = max(0, math.ceil(math.log2(n))) if n > 0 else 0
    return qmc.Sobol(dim, scramble=True, seed=seed).random_base2(m)[:n]


def _model_outputs(problem: Problem, Y_obs: np.ndarray) -> np.ndarray:
    """Objectives as observed, constraints through bilog (which keeps the feasibility sign)."""
    out = Y_obs.copy()
    k = problem.num_objectives
    out[:, k:] = bilog(out[:, k:])
    return out


def best_so_far(problem: Problem, Y_true: np.ndarray) -> float:
    """Best feasible objective, or the dominated hypervolume for bi-objective problems."""
    if problem.is_multi_objective:
        P = pareto_filter(Y_true[:, :2], problem.ref_point)
        return hypervolume(P, problem.ref_point)
    feasible = problem.is_feasible(Y_true)
    if not feasible.any():
        return -math.inf
    return float(Y_true[feasible, 0].max())


# ==================== BO Loop ====================

def _fit_models(data: DataSet, seed: int) -> ModelList:
    try:
        return ModelList.fit(data, seed=seed)
    except FitError as e:
        logger.warning("model fit failed (%s); retrying once with fresh restarts", e)
        return ModelList.fit(data, seed=seed + FIT_RETRY_OFFSET, restarts=2 * FIT_RESTARTS)


def build_acquisition(config: RunConfig, problem: Problem, model: ModelList, Y_obs: np.ndarray, seed: int):
    """Instantiate the configured acquisition over a fitted model list."""
    name = config.acquisition
    family = ACQUISITIONS[name]
    if family == "ehvi":
        Y = Y_obs[:, :2]
        ref = problem.ref_point
        frontier = pareto_filter(Y, ref)
        decomposition = box_decompose(frontier, default_upper_bound(Y, ref), ref)
        return EHVIAcquisition(
            model, name, frontier, decomposition, config.temps, seed,
            config.fat, config.log_expected, config.mc_samples,
        )
    feasible = problem.is_feasible(Y_obs) if problem.num_constraints else None
    incumbent = IncumbentState.from_outputs(model.data.outputs[:, 0], feasible)
    if family == "analytic":
        return AnalyticAcquisition(model, name, incumbent, beta=config.beta)
    return MCAcquisition(model, name, incumbent, config.temps, seed, config.fat, config.mc_samples)


def _observe(problem: Problem, Y_true: np.ndarray, noise_std: Optional[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    if noise_std is None:
        return Y_true.copy()
    Y = Y_true.copy()
    k = problem.num_objectives
    Y[:, :k] += rng.normal(size=(Y.shape[0], k)) * noise_std
    return Y


def run_replicate(config: RunConfig, replicate: int) -> list[TrialRecord]:
    """
    One seeded BO run: Sobol initial design, then `iterations` rounds of
    fit -> optimize acquisition -> evaluate.

    A fit or optimization failure that survives the retry ends the replicate
    with a single `failed` record; it is never dropped silently.
    """
    problem = get_problem(config.problem)
    seeds = replicate_seeds(config.seed, replicate)
    rng = np.random.default_rng(seeds["noise"])
    noise_std = config.noise_fraction * problem.value_range if config.noise_fraction > 0 else None
    d, M = problem.dim, problem.num_outputs

    X = initial_design(d, config.n_init, seeds["design"])
    Y_true = problem.evaluate(X)
    Y_obs = _observe(problem, Y_true, noise_std, rng)

    records = []
    for i in range(X.shape[0]):
        records.append(TrialRecord(
            replicate=replicate, iteration=0, phase="init", x=X[i].tolist(), y=Y_obs[i].tolist(),
            best=best_so_far(problem, Y_true[: i + 1]), seed=seeds["design"],
        ))

    model = None
    for t in range(1, config.iterations + 1):
        start = time.perf_counter()
        it_seed = _iteration_seed(seeds["acq"], t)
        try:
            data = DataSet.from_raw(X, _model_outputs(problem, Y_obs))
            model = _fit_models(data, _iteration_seed(seeds["fit"], t))
            acq = build_acquisition(config, problem, model, Y_obs, it_seed)
            report = optimize_acq(acq, model, config.q, config.optim.model_copy(update={"seed": it_seed}))
        except LogAcqError as e:
            logger.warning("replicate %d failed at iteration %d: %s", replicate, t, e)
            records.append(TrialRecord(
                replicate=replicate, iteration=t, phase="failed", x=[math.nan] * d, y=[math.nan] * M,
                best=best_so_far(problem, Y_true), seed=it_seed,
            ))
            break

        candidates = report.best_x.detach().numpy().reshape(config.q, d)
        y_true = problem.evaluate(candidates)
        y_obs = _observe(problem, y_true, noise_std, rng)
        X = np.vstack([X, candidates])
        Y_true = np.vstack([Y_true, y_true])
        Y_obs = np.vstack([Y_obs, y_obs])

        best = best_so_far(problem, Y_true)
        wall_ms = (time.perf_counter() - start) * 1000.0 if config.record_timing else 0.0
        if not math.isfinite(report.best_value):
            logger.warning("replicate %d iteration %d selected a non-finite acquisition value", replicate, t)
        for j in range(config.q):
            records.append(TrialRecord(
                replicate=replicate, iteration=t, phase="bo", x=candidates[j].tolist(), y=y_obs[j].tolist(),
                best=best, acq_value=report.best_value, zero_grad_restarts=report.zero_grad_restarts,
                wall_ms=wall_ms, seed=it_seed,
            ))
        logger.info(
            "%s/%s rep %d iter %d: best=%.6g acq=%.6g zero-grad restarts=%d",
            config.problem, config.acquisition, replicate, t, best, report.best_value, report.zero_grad_restarts,
        )

    if config.save_models and config.out and model is not None:
        save_model(model, f"{config.out}.rep{replicate}.model.json", {
            "problem": config.problem, "acquisition": config.acquisition, "replicate": replicate,
        })
    return records


def shard_path(out: str, replicate: int) -> str:
    return f"{out}.rep{replicate}.shard.csv"


def _worker_init() -> None:
    torch.set_num_threads(1)


def _replicate_to_shard(config: RunConfig, replicate: int) -> str:
    path = shard_path(config.out, replicate)
    problem = get_problem(config.problem)
    write_results(run_replicate(config, replicate), path, problem.dim, problem.num_outputs)
    return path


def run_bo(config: RunConfig) -> list[TrialRecord]:
    """
    Run every replicate, sequentially or across `config.jobs` processes.

    With an output path the records are written as CSV and the config as
    `<out>.config.json`; parallel runs write one shard per replicate and
    merge them in (replicate, iteration) order.
    """
    problem = get_problem(config.problem)
    replicates = list(range(config.replicates))
    parallel = config.jobs > 1 and len(replicates) > 1

    if parallel and config.out:
        with ProcessPoolExecutor(max_workers=config.jobs, initializer=_worker_init) as pool:
            shards = list(pool.map(_replicate_to_shard, [config] * len(replicates), replicates))
        records = merge_shards(shards, config.out, problem.dim, problem.num_outputs)
    else:
        if parallel:
            with ProcessPoolExecutor(max_workers=config.jobs, initializer=_worker_init) as pool:
                batches = list(pool.map(run_replicate, [config] * len(replicates), replicates))
        else:
            batches = [run_replicate(config, k) for k in replicates]
        records = [r for batch in batches for r in batch]
        if config.out:
            write_results(records, config.out, problem.dim, problem.num_outputs)

    if config.out:
        save_run_config(config, f"{config.out}.config.json")
    return records


# ==================== CSV Persistence ====================

def _fmt(value: float) -> str:
    # repr round-trips every double exactly
    return repr(float(value))


def results_header(dim: int, num_outputs: int) -> list[str]:
    return (
        ["replicate", "iteration", "phase"]
        + [f"x{i}" for i in range(dim)]
        + [f"y{m}" for m in range(num_outputs)]
        + CSV_TAIL
    )


def write_results(records: Sequence[TrialRecord], path: str, dim: Optional[int] = None, num_outputs: Optional[int] = None) -> None:
    """Write records as CSV; an empty list produces a header-only file."""
    if records:
        dim, num_outputs = len(records[0].x), len(records[0].y)
    dim, num_outputs = dim or 0, num_outputs or 0
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(results_header(dim, num_outputs))
            for r in records:
                writer.writerow(
                    [r.replicate, r.iteration, r.phase]
                    + [_fmt(v) for v in r.x]
                    + [_fmt(v) for v in r.y]
                    + [_fmt(r.best), _fmt(r.acq_value), r.zero_grad_restarts, _fmt(r.wall_ms), r.seed]
                )
    except OSError as e:
        raise OSError(f"cannot write results {path}: {e}") from e


def _indexed_columns(header: list[str], prefix: str) -> list[str]:
    cols = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
    return sorted(cols, key=lambda h: int(h[len(prefix):]))


def read_results(path: str) -> list[TrialRecord]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            x_cols = _indexed_columns(header, "x")
            y_cols = _indexed_columns(header, "y")
            return [
                TrialRecord(
                    replicate=int(row["replicate"]),
                    iteration=int(row["iteration"]),
                    phase=row["phase"],
                    x=[float(row[c]) for c in x_cols],
                    y=[float(row[c]) for c in y_cols],
                    best=float(row["best"]),
                    acq_value=float(row["acq_value"]),
                    zero_grad_restarts=int(row["zero_grad_restarts"]),
                    wall_ms=float(row["wall_ms"]),
                    seed=int(row["seed"]),
                )
                for row in reader
            ]
    except OSError as e:
        raise OSError(f"cannot read results {path}: {e}") from e


def merge_shards(shards: Sequence[str], out: str, dim: Optional[int] = None, num_outputs: Optional[int] = None) -> list[TrialRecord]:
    """Concatenate shard files ordered by (replicate, iteration), write `out`, remove the shards."""
    records = [r for path in shards for r in read_results(path)]
    # stable sort keeps the in-batch order of rows sharing an iteration
    records.sort(key=lambda r: (r.replicate, r.iteration))
    write_results(records, out, dim, num_outputs)
    for path in shards:
        os.remove(path)
    return records


# ==================== Summary ====================

class SummaryRow(BaseModel):
    label: str
    iteration: int
    replicates: int
    mean_best: float
    se2_best: float
    mean_regret: Optional[float] = None


def _final_best_per_iteration(records: Sequence[TrialRecord]) -> dict[int, dict[int, float]]:
    """iteration -> replicate -> best after that iteration."""
    table: dict[int, dict[int, float]] = {}
    for r in records:
        if r.phase == "failed":
            continue
        table.setdefault(r.iteration, {})[r.replicate] = r.best
    return table


def summarize_results(runs: dict[str, Sequence[TrialRecord]], optimum: Optional[float] = None) -> list[SummaryRow]:
    """
    Mean and two standard errors of best-so-far per (label, iteration) across
    replicates, plus mean regret against `optimum` when it is known.
    Replicates without a finite best at an iteration are left out there.
    """
    rows = []
    for label in sorted(runs):
        for iteration, per_rep in sorted(_final_best_per_iteration(runs[label]).items()):
            values = np.array([v for v in per_rep.values() if math.isfinite(v)])
            if values.size == 0:
                continue
            se2 = 2.0 * values.std(ddof=1) / math.sqrt(values.size) if values.size > 1 else 0.0
            regret = float(np.mean(optimum - values)) if optimum is not None else None
            rows.append(SummaryRow(
                label=label, iteration=iteration, replicates=int(values.size),
                mean_best=float(values.mean()), se2_best=float(se2), mean_regret=regret,
            ))
    return rows


def write_summary(rows: Sequence[SummaryRow], path: str) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["label", "iteration", "replicates", "mean_best", "se2_best", "mean_regret"])
            for r in rows:
                regret = "" if r.mean_regret is None else _fmt(r.mean_regret)
                writer.writerow([r.label, r.iteration, r.replicates, _fmt(r.mean_best), _fmt(r.se2_best), regret])
    except OSError as e:
        raise OSError(f"cannot write summary {path}: {e}") from e


# ==================== Gradient Vanishing ====================

class GradFracRow(BaseModel):
    """Share of test points whose acquisition gradient norm is below `threshold`."""

    d: int
    n: int
    replicate: int
    acquisition: str
    fraction: float
    threshold: float
    clamped: int = 0


def dgp_inputs(problem: Problem, n: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """
    80% uniform points plus 20% from a Gaussian around the optimum
    (std 0.25 of the unit side). Cluster draws are clamped to the cube;
    the number of clamped coordinates is returned alongside.
    """
    n_cluster = int(round((1.0 - DGP_UNIFORM_SHARE) * n))
    uniform = rng.uniform(size=(n - n_cluster, problem.dim))
    center = problem.optimum_unit_location()
    if center is None:
        center = np.full(problem.dim, 0.5)
    cluster = rng.normal(center, DGP_CLUSTER_STD, size=(n_cluster, problem.dim))
    clamped = int(np.sum((cluster < 0.0) | (cluster > 1.0)))
    return np.vstack([uniform, np.clip(cluster, 0.0, 1.0)]), clamped


def gradient_norms(acq, X_test: np.ndarray) -> torch.Tensor:
    X = torch.tensor(X_test[:, None, :], dtype=DTYPE, requires_grad=True)
    values = acq(X)
    # values are independent per point, so the gradient of the sum is per point
    (grad,) = torch.autograd.grad(values.sum(), X)
    return grad.reshape(X_test.shape[0], -1).norm(dim=-1)


def _gradfrac_model(data: DataSet, seed: int) -> ModelList:
    if data.n >= 2:
        return ModelList.fit(data, seed=seed)
    # too little data to fit: the default prior
    return ModelList([GPModel(default_hyperparams(data.d), data, 0)])


def grad_vanish_experiment(
    dims: Sequence[int],
    ns: Sequence[int],
    replicates: int = 1,
    seed: int = 0,
    n_test: int = GRADFRAC_TEST_POINTS,
    threshold: float = GRADFRAC_THRESHOLD,
    acquisitions: Sequence[str] = ("ei", "logei"),
) -> list[GradFracRow]:
    """
    For each (d, n, replicate): draw the Ackley training set, fit a GP, and
    measure how many uniform test points have a gradient norm below `threshold`.

    With n = 0 the flat prior gives identical beliefs everywhere, so every
    gradient is exactly zero; this is recorded as measured.
    """
    if replicates < 1:
        raise ConfigError("replicates must be at least 1")
    rows = []
    for d in sorted(dims):
        problem = Ackley(d)
        for n in sorted(ns):
            if n < 0:
                raise ConfigError(f"training-set size must be nonnegative, got {n}")
            for rep in range(replicates):
                rng = np.random.default_rng(np.random.SeedSequence([seed, d, n, rep]))
                X, clamped = dgp_inputs(problem, n, rng)
                Y = problem.evaluate(X)[:, :1] if n else np.zeros((0, 1))
                data = DataSet.from_raw(X.reshape(n, d), Y)
                model = _gradfrac_model(data, int(rng.integers(2 ** 31)))
                y_star = float(data.outputs[:, 0].max()) if n else 0.0
                X_test = rng.uniform(size=(n_test, d))
                for name in acquisitions:
                    acq = AnalyticAcquisition(model, name, IncumbentState(y_star))
                    norms = gradient_norms(acq, X_test)
                    fraction = float((norms < threshold).double().mean())
                    rows.append(GradFracRow(d=d, n=n, replicate=rep, acquisition=name, fraction=fraction, threshold=threshold, clamped=clamped))
                    logger.info("gradfrac d=%d n=%d rep=%d %s: %.4f", d, n, rep, name, fraction)
    return rows


def aggregate_gradfrac(rows: Sequence[GradFracRow]) -> list[dict]:
    """Mean fraction per (d, n, acquisition), sorted by (d, n)."""
    groups: dict[tuple[int, int, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r.d, r.n, r.acquisition), []).append(r.fraction)
    return [
        {"d": d, "n": n, "acquisition": a, "fraction": float(np.mean(v)), "replicates": len(v)}
        for (d, n, a), v in sorted(groups.items())
    ]


def write_gradfrac(rows: Sequence[GradFracRow], path: str) -> None:
    ordered = sorted(rows, key=lambda r: (r.d, r.n, r.replicate, r.acquisition))
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["d", "n", "replicate", "acquisition", "fraction", "threshold", "clamped"])
            for r in ordered:
                writer.writerow([r.d, r.n, r.replicate, r.acquisition, _fmt(r.fraction), _fmt(r.threshold), r.clamped])
    except OSError as e:
        raise OSError(f"cannot write gradient table {path}: {e}") from e
