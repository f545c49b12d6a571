"""
Analytic Acquisitions
=====================
Closed-form single-point acquisitions and their log-space counterparts:
EI, LogEI, PI, LogPI, UCB, CEI and LogCEI.

The naive EI, PI and CEI are kept exactly as written (including their
numerically-zero regions) so they can serve as baselines.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import ConfigError, DomainError
from .settings import DTYPE
from .stable_math import CONSTANTS, SQRT2, _as_tensor, _log1mexp, logerfc, log_ndtr
from .surrogate import ModelList, PosteriorGaussian

logger = logging.getLogger(__name__)

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class IncumbentState:
    """
    Best observed objective on the standardized scale.

    `y_star` is None when no observation satisfies the constraints; LogCEI then
    maximizes the log-probability of feasibility alone.
    """

    y_star: Optional[float]
    feasibility_rule: str = "best_observed"

    @property
    def defined(self) -> bool:
        return self.y_star is not None

    @classmethod
    def from_outputs(cls, objective, feasible=None) -> "IncumbentState":
        y = _as_tensor(objective).reshape(-1)
        if feasible is None:
            if y.numel() == 0:
                return cls(None)
            return cls(float(y.max()))
        mask = torch.as_tensor(feasible, dtype=torch.bool).reshape(-1)
        if not torch.any(mask):
            return cls(None, "best_feasible")
        return cls(float(y[mask].max()), "best_feasible")


@dataclass
class AcqResult:
    """Acquisition value plus its gradient with respect to the candidate coordinates."""

    value: torch.Tensor
    gradient: Optional[torch.Tensor] = None
    info: dict = field(default_factory=dict)


# ==================== log h ====================

def _h(z: torch.Tensor) -> torch.Tensor:
    return torch.exp(-0.5 * z * z) * INV_SQRT_2PI + z * torch.special.ndtr(z)


def log_h(z) -> torch.Tensor:
    """
    log(φ(z) + zΦ(z)) in three branches:

    - z > -1: direct evaluation
    - -1/√eps < z <= -1: -z²/2 - c1 + log1mexp(log(erfcx(-z/√2)·|z|) + c2)
    - z <= -1/√eps: -z²/2 - c1 - 2·log|z|

    Value and derivative stay finite for every representable z.
    """
    z = _as_tensor(z)
    c = CONSTANTS
    upper = z > -1.0
    lower = z <= -c.inv_sqrt_eps
    middle = ~upper & ~lower

    z_up = torch.where(upper, z, torch.zeros_like(z))
    z_mid = torch.where(middle, z, torch.full_like(z, -2.0))
    z_low = torch.where(lower, z, torch.full_like(z, -2.0 * c.inv_sqrt_eps))

    direct = torch.log(_h(z_up))
    arg = torch.log(torch.special.erfcx(-z_mid / SQRT2) * z_mid.abs()) + c.c2
    # arg ≈ -1/z² < 0; rounding can push it to 0 near the asymptotic threshold
    arg = torch.clamp(arg, max=-c.eps / 4.0)
    mid = -0.5 * z_mid * z_mid - c.c1 + _log1mexp(arg)
    low = -0.5 * z_low * z_low - c.c1 - 2.0 * torch.log(z_low.abs())
    return torch.where(upper, direct, torch.where(middle, mid, low))


# ==================== Moment-Level Values ====================

def _z(mu, sigma, y_star) -> torch.Tensor:
    return (_as_tensor(mu) - y_star) / _as_tensor(sigma)


def ei_value(mu, sigma, y_star: float) -> torch.Tensor:
    sigma = _as_tensor(sigma)
    return sigma * _h(_z(mu, sigma, y_star))


def logei_value(mu, sigma, y_star: float) -> torch.Tensor:
    sigma = _as_tensor(sigma)
    return log_h(_z(mu, sigma, y_star)) + torch.log(sigma)


def pi_value(mu, sigma, y_star: float) -> torch.Tensor:
    return torch.special.ndtr(_z(mu, sigma, y_star))


def logpi_value(mu, sigma, y_star: float) -> torch.Tensor:
    return logerfc(-_z(mu, sigma, y_star) / SQRT2) - math.log(2.0)


def ucb_value(mu, sigma, beta: float = 2.0) -> torch.Tensor:
    if beta < 0:
        raise DomainError(f"UCB beta must be nonnegative, got {beta}")
    return _as_tensor(mu) + math.sqrt(beta) * _as_tensor(sigma)


def log_feasibility(mus: Sequence, sigmas: Sequence, thresholds: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Σ_k log P(c_k <= t_k) under independent Gaussian constraint beliefs."""
    total = torch.zeros((), dtype=DTYPE)
    thresholds = thresholds if thresholds is not None else [0.0] * len(mus)
    for mu, sigma, t in zip(mus, sigmas, thresholds):
        total = total + log_ndtr((t - _as_tensor(mu)) / _as_tensor(sigma))
    return total


def cei_value(mu, sigma, inc: IncumbentState, c_mus=(), c_sigmas=(), thresholds=None) -> torch.Tensor:
    pof = torch.ones((), dtype=DTYPE)
    thresholds = thresholds if thresholds is not None else [0.0] * len(c_mus)
    for cm, cs, t in zip(c_mus, c_sigmas, thresholds):
        pof = pof * torch.special.ndtr((t - _as_tensor(cm)) / _as_tensor(cs))
    if not inc.defined:
        return pof * torch.ones_like(_as_tensor(mu))
    return ei_value(mu, sigma, inc.y_star) * pof


def logcei_value(mu, sigma, inc: IncumbentState, c_mus=(), c_sigmas=(), thresholds=None) -> torch.Tensor:
    log_pof = log_feasibility(c_mus, c_sigmas, thresholds)
    if not inc.defined:
        return log_pof * torch.ones_like(_as_tensor(mu))
    return logei_value(mu, sigma, inc.y_star) + log_pof


# ==================== Posterior-Level Operations ====================

def _result(value: torch.Tensor, post: PosteriorGaussian) -> AcqResult:
    grad = None
    X = post.X
    if X is not None and X.requires_grad and value.requires_grad:
        (grad,) = torch.autograd.grad(value.sum(), X, retain_graph=True)
    return AcqResult(value.detach(), grad)


def _require_incumbent(inc: IncumbentState) -> float:
    if not inc.defined:
        raise DomainError("this acquisition needs a defined incumbent")
    return inc.y_star


def ei(post: PosteriorGaussian, inc: IncumbentState) -> AcqResult:
    """Naive σ·h(z); underflows to exactly 0 once z drops below about -38."""
    return _result(ei_value(post.mu, post.sigma, _require_incumbent(inc)), post)


def logei(post: PosteriorGaussian, inc: IncumbentState) -> AcqResult:
    """log_h(z) + log σ with z = (μ - y*)/σ."""
    return _result(logei_value(post.mu, post.sigma, _require_incumbent(inc)), post)


def pi(post: PosteriorGaussian, inc: IncumbentState) -> AcqResult:
    return _result(pi_value(post.mu, post.sigma, _require_incumbent(inc)), post)


def logpi(post: PosteriorGaussian, inc: IncumbentState) -> AcqResult:
    """log Φ(z) = logerfc(-z/√2) - log 2."""
    return _result(logpi_value(post.mu, post.sigma, _require_incumbent(inc)), post)


def ucb(post: PosteriorGaussian, beta: float = 2.0) -> AcqResult:
    return _result(ucb_value(post.mu, post.sigma, beta), post)


def cei(post_objective: PosteriorGaussian, posts_constraints: Sequence[PosteriorGaussian], inc: IncumbentState, thresholds=None) -> AcqResult:
    value = cei_value(
        post_objective.mu, post_objective.sigma, inc,
        [p.mu for p in posts_constraints], [p.sigma for p in posts_constraints], thresholds,
    )
    return _result(value, post_objective)


def logcei(post_objective: PosteriorGaussian, posts_constraints: Sequence[PosteriorGaussian], inc: IncumbentState, thresholds=None) -> AcqResult:
    """
    LogEI plus Σ_k log P(c_k <= t_k).

    Without a feasible incumbent the LogEI term is dropped and only the
    log-probability of feasibility is maximized.
    """
    value = logcei_value(
        post_objective.mu, post_objective.sigma, inc,
        [p.mu for p in posts_constraints], [p.sigma for p in posts_constraints], thresholds,
    )
    return _result(value, post_objective)


# ==================== Optimizer Adapter ====================

ANALYTIC_NAMES = ("ei", "logei", "pi", "logpi", "ucb", "cei", "logcei")


class AnalyticAcquisition:
    """
    Callable X (..., 1, d) -> values (...) over a fitted model list.

    Output 0 is the objective; outputs 1.. are constraints, feasible when
    c <= 0 on the raw scale, i.e. below `thresholds` on the standardized scale.
    """

    supports_batch = False

    def __init__(self, model: ModelList, name: str, incumbent: IncumbentState, beta: float = 2.0, thresholds: Optional[Sequence[float]] = None):
        if name not in ANALYTIC_NAMES:
            raise ConfigError(f"unknown analytic acquisition '{name}'")
        self.model = model
        self.name = name
        self.incumbent = incumbent
        self.beta = beta
        n_cons = model.num_outputs - 1
        if thresholds is None:
            thresholds = [float(model.data.standardize(0.0, m)) for m in range(1, model.num_outputs)]
        self.thresholds = list(thresholds)
        if len(self.thresholds) != n_cons:
            raise ConfigError(f"{len(self.thresholds)} thresholds for {n_cons} constraints")
        if name not in ("cei", "logcei", "ucb") and not incumbent.defined:
            raise DomainError(f"{name} needs a defined incumbent")

    @property
    def d(self) -> int:
        return self.model.d

    def __call__(self, X) -> torch.Tensor:
        X = torch.as_tensor(X, dtype=DTYPE)
        if X.shape[-2] != 1:
            raise ConfigError(f"{self.name} is analytic and only supports q = 1")
        post = self.model.models[0].posterior(X)
        mu, sigma = post.mu, post.sigma
        if self.name == "ucb":
            return ucb_value(mu, sigma, self.beta)
        if self.name in ("cei", "logcei"):
            c_posts = [m.posterior(X) for m in self.model.models[1:]]
            fn = logcei_value if self.name == "logcei" else cei_value
            return fn(mu, sigma, self.incumbent, [p.mu for p in c_posts], [p.sigma for p in c_posts], self.thresholds)
        fn = {"ei": ei_value, "logei": logei_value, "pi": pi_value, "logpi": logpi_value}[self.name]
        return fn(mu, sigma, self.incumbent.y_star)
