"""
Acquisition Optimizer
=====================
Multi-start gradient-based maximization of acquisition functions over the unit cube.

An acquisition is any callable mapping a candidate tensor of shape (..., q, d)
to values of shape (...). Batch-capable acquisitions expose `with_pending(X)`
so sequential-greedy construction can condition on earlier selections;
analytic acquisitions set `supports_batch = False` and only accept q = 1.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import minimize

from .errors import ConfigError, OptimizationError
from .settings import DTYPE

logger = logging.getLogger(__name__)

LBFGS_HISTORY = 10
# below this the initial gradient counts as numerically vanished
ZERO_GRAD_TOL = 1e-10
# scale of the value returned for non-finite objective evaluations
PENALTY_SCALE = 1e6

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class OptimConfig(BaseModel):
    """Multi-start optimizer settings."""

    model_config = ConfigDict(extra="forbid")

    n_restarts: int = Field(default=16, ge=1)
    raw_candidates: int = Field(default=1024, ge=1)
    init_strategy: Literal["uniform", "boltzmann"] = "uniform"
    max_iters: int = Field(default=200, ge=1)
    grad_tol: float = Field(default=1e-8, gt=0)
    mode: Literal["joint", "sequential_greedy"] = "joint"
    seed: int = 0

    @model_validator(mode="after")
    def check_pool(self) -> "OptimConfig":
        if self.raw_candidates < self.n_restarts:
            raise ValueError("raw_candidates must be at least n_restarts")
        return self


@dataclass
class LocalResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    message: str = ""


@dataclass
class RestartTrace:
    index: int
    start: torch.Tensor
    end: Optional[torch.Tensor]
    value: float
    iterations: int
    converged: bool
    zero_initial_grad: bool
    failed: bool = False


@dataclass
class OptimReport:
    best_x: torch.Tensor
    best_value: float
    traces: list[RestartTrace] = field(default_factory=list)
    zero_grad_restarts: int = 0
    boltzmann_fallback: bool = False

    @property
    def n_restarts(self) -> int:
        return len(self.traces)


# ==================== Local Optimizer ====================

def lbfgsb_local(objective: Objective, x0, config: Optional[OptimConfig] = None, bounds=None) -> LocalResult:
    """
    Maximize `objective` from x0 inside a box with scipy's L-BFGS-B.

    Args:
        objective: x -> (value, gradient), both as numpy
        x0: starting point (flattened internally, clipped to the box)
        config: supplies max_iters and grad_tol (defaults when omitted)
        bounds: (k, 2) array of lower/upper limits; the unit box when omitted

    Returns:
        LocalResult with the final iterate, which never leaves the box

    Raises:
        OptimizationError: if the objective is not finite at x0
    """
    config = config or OptimConfig()
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    if bounds is None:
        bounds = np.tile([0.0, 1.0], (x0.size, 1))
    bounds = np.asarray(bounds, dtype=np.float64)
    lo, hi = bounds[:, 0], bounds[:, 1]
    x0 = np.clip(x0, lo, hi)

    f0, g0 = objective(x0)
    if not math.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise OptimizationError(f"objective is not finite at the start point (value {f0})")
    # non-finite evaluations mid-run get a value worse than the start so the
    # line search backtracks away from them
    penalty = -f0 + PENALTY_SCALE * (1.0 + abs(f0))

    def negated(x: np.ndarray) -> tuple[float, np.ndarray]:
        f, g = objective(x)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            return penalty, np.zeros_like(x)
        return -f, -np.asarray(g, dtype=np.float64)

    res = minimize(
        negated,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        options={
            "maxiter": config.max_iters,
            "maxcor": LBFGS_HISTORY,
            "gtol": config.grad_tol,
            "ftol": 1e-15,
        },
    )
    x = np.clip(res.x, lo, hi)
    value = -float(res.fun)
    if not math.isfinite(value) or value < f0:
        x, value = x0, f0
    return LocalResult(x=x, value=value, iterations=int(res.nit), converged=bool(res.status == 0), message=str(res.message))


# ==================== Initialization ====================

def _acq_dim(model, acq) -> int:
    d = getattr(model, "d", None) if model is not None else None
    return int(d if d is not None else acq.d)


def initialize(acq, model, config: OptimConfig, seed: int, q: int = 1) -> tuple[torch.Tensor, bool]:
    """
    Pick restart points of shape (n_restarts, q, d).

    Uniform mode draws i.i.d. points. Boltzmann mode evaluates `acq` on
    raw_candidates uniform batches, standardizes the finite values over the pool
    and samples n_restarts of them without replacement with softmax weights.

    Returns:
        (start points, True when Boltzmann fell back to uniform draws)
    """
    d = _acq_dim(model, acq)
    gen = torch.Generator().manual_seed(int(seed))
    if config.init_strategy == "uniform":
        return torch.rand(config.n_restarts, q, d, generator=gen, dtype=DTYPE), False

    pool = torch.rand(config.raw_candidates, q, d, generator=gen, dtype=DTYPE)
    with torch.no_grad():
        values = acq(pool).reshape(-1)
    finite = torch.isfinite(values)
    if not torch.any(finite):
        logger.warning("all %d Boltzmann pool values are non-finite, using uniform starts", config.raw_candidates)
        return torch.rand(config.n_restarts, q, d, generator=gen, dtype=DTYPE), True

    v = values[finite]
    std = v.std() if v.numel() > 1 else torch.zeros((), dtype=DTYPE)
    z = (v - v.mean()) / std if std > 0 else torch.zeros_like(v)
    weights = torch.zeros_like(values)
    weights[finite] = torch.softmax(z, dim=0)

    n_pick = min(config.n_restarts, int((weights > 0).sum()))
    idx = torch.multinomial(weights, n_pick, replacement=False, generator=gen)
    starts = pool[idx]
    if n_pick < config.n_restarts:
        extra = torch.rand(config.n_restarts - n_pick, q, d, generator=gen, dtype=DTYPE)
        starts = torch.cat([starts, extra], dim=0)
    return starts, False


# ==================== Multi-Start ====================

def _value_and_grad(acq, q: int, d: int) -> Objective:
    def objective(flat: np.ndarray) -> tuple[float, np.ndarray]:
        X = torch.tensor(flat.reshape(q, d), dtype=DTYPE, requires_grad=True)
        value = acq(X)
        if not torch.isfinite(value):
            return float("-inf"), np.zeros_like(flat)
        (grad,) = torch.autograd.grad(value, X)
        return float(value), grad.numpy().ravel().copy()

    return objective


def _optimize_batch(acq, model, q: int, config: OptimConfig, seed: int) -> OptimReport:
    d = _acq_dim(model, acq)
    starts, fell_back = initialize(acq, model, config, seed, q)
    objective = _value_and_grad(acq, q, d)

    traces = []
    best_i = None
    for i, start in enumerate(starts):
        flat0 = start.reshape(-1).numpy()
        f0, g0 = objective(flat0)
        zero_grad = math.isfinite(f0) and float(np.linalg.norm(g0)) < ZERO_GRAD_TOL
        try:
            res = lbfgsb_local(objective, flat0, config)
        except OptimizationError as e:
            logger.debug("restart %d failed: %s", i, e)
            traces.append(RestartTrace(i, start, None, float("-inf"), 0, False, zero_grad, failed=True))
            continue
        end = torch.tensor(res.x.reshape(q, d), dtype=DTYPE)
        traces.append(RestartTrace(i, start, end, res.value, res.iterations, res.converged, zero_grad))
        logger.debug("restart %d: %.6g -> %.6g in %d iterations", i, f0, res.value, res.iterations)
        # strict comparison keeps the lowest index on ties
        if best_i is None or res.value > traces[best_i].value:
            best_i = len(traces) - 1

    if best_i is None:
        raise OptimizationError(f"all {len(starts)} restarts failed")
    best_x = traces[best_i].end
    with torch.no_grad():
        best_value = float(acq(best_x))
    return OptimReport(
        best_x=best_x,
        best_value=best_value,
        traces=traces,
        zero_grad_restarts=sum(t.zero_initial_grad for t in traces),
        boltzmann_fallback=fell_back,
    )


def optimize_acq(acq, model, q: int, config: OptimConfig) -> OptimReport:
    """
    Maximize `acq` over [0, 1]^(q×d).

    Joint mode optimizes all q·d coordinates from each restart. Sequential-greedy
    mode runs q single-point optimizations, the i-th seeded with seed + i and
    conditioned on the earlier picks through `acq.with_pending`.

    Raises:
        ConfigError: if q > 1 is requested from an analytic acquisition
        OptimizationError: if every restart fails
    """
    if q < 1:
        raise ConfigError(f"q must be at least 1, got {q}")
    if q > 1 and not getattr(acq, "supports_batch", True):
        raise ConfigError(f"{type(acq).__name__} is analytic and only supports q = 1")

    if config.mode == "joint" or q == 1:
        return _optimize_batch(acq, model, q, config, config.seed)

    selected: list[torch.Tensor] = []
    traces: list[RestartTrace] = []
    zero_grads = 0
    fell_back = False
    for i in range(q):
        step_acq = acq.with_pending(torch.cat(selected, dim=0)) if selected else acq
        step = _optimize_batch(step_acq, model, 1, config, config.seed + i)
        selected.append(step.best_x)
        traces.extend(step.traces)
        zero_grads += step.zero_grad_restarts
        fell_back = fell_back or step.boltzmann_fallback

    best_x = torch.cat(selected, dim=0)
    with torch.no_grad():
        best_value = float(acq(best_x))
    return OptimReport(best_x, best_value, traces, zero_grads, fell_back)
