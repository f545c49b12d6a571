"""
Monte-Carlo Acquisitions
========================
Sample-average-approximation batch acquisitions: the hard qEI baseline and the
log-space qLogEI, constrained qLogEI and qLogNEI.

All smooth variants reduce a per-draw, per-candidate log-improvement with a
smooth maximum over candidates and a log-mean-exp over draws, so the value
never leaves log-space and every candidate keeps a gradient.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .acq_analytic import AcqResult, IncumbentState
from .errors import ConfigError, DomainError
from .settings import DTYPE, mc_samples_for
from .stable_math import fatmax, log_fatplus, log_fatsigmoid, logmeanexp, logsoftplus
from .surrogate import ModelList, SampleMatrix, draw_base_samples, sample

logger = logging.getLogger(__name__)


class Temperatures(BaseModel):
    """Smoothing temperatures of the relaxed improvement utilities."""

    model_config = ConfigDict(extra="forbid")

    tau_0: float = Field(default=1e-6, gt=0)
    tau_max: float = Field(default=1e-2, gt=0, le=1)
    tau_cons: float = Field(default=1e-2, gt=0)


@dataclass(frozen=True)
class CandidateBatch:
    """q candidates plus optional pending (selected, not yet observed) points."""

    X: torch.Tensor
    pending: Optional[torch.Tensor] = None

    def __post_init__(self):
        for name, t in (("X", self.X), ("pending", self.pending)):
            if t is None:
                continue
            if t.dim() < 2 or t.shape[-2] < 1:
                raise DomainError(f"{name} must hold at least one point")
            if t.min() < 0 or t.max() > 1:
                raise DomainError(f"{name} must lie in the unit cube")

    @property
    def q(self) -> int:
        return self.X.shape[-2]

    def joint(self) -> torch.Tensor:
        """Candidates followed by the pending points, which carry no gradient."""
        if self.pending is None:
            return self.X
        pending = self.pending.detach().expand(*self.X.shape[:-2], *self.pending.shape[-2:])
        return torch.cat([self.X, pending], dim=-2)


# ==================== Smooth Reductions ====================

def _log_improvement(z: torch.Tensor, temps: Temperatures, fat: bool) -> torch.Tensor:
    if fat:
        return log_fatplus(z, tau=temps.tau_0)
    return logsoftplus(z, tau=temps.tau_0)


def _log_feasible(slack: torch.Tensor, temps: Temperatures, fat: bool) -> torch.Tensor:
    # slack > 0 means infeasible
    if fat:
        return log_fatsigmoid(-slack, tau=temps.tau_cons)
    return F.logsigmoid(-slack / temps.tau_cons)


def _smooth_max(v: torch.Tensor, temps: Temperatures, fat: bool) -> torch.Tensor:
    if fat:
        return fatmax(v, tau=temps.tau_max, dim=-1)
    return temps.tau_max * torch.logsumexp(v / temps.tau_max, dim=-1)


def _reduce(log_util: torch.Tensor, temps: Temperatures, fat: bool) -> torch.Tensor:
    """(..., N, q) per-draw per-candidate log utilities -> (...) log of the MC mean."""
    return logmeanexp(_smooth_max(log_util, temps, fat), dim=-1)


def _objective(samples: SampleMatrix) -> torch.Tensor:
    return samples.samples[..., 0]


def _result(value: torch.Tensor, samples: SampleMatrix) -> AcqResult:
    grad = None
    X = samples.X
    if X is not None and X.requires_grad and value.requires_grad:
        (grad,) = torch.autograd.grad(value.sum(), X, retain_graph=True)
    return AcqResult(value.detach(), grad)


def _y_star(inc) -> float:
    y_star = inc.y_star if isinstance(inc, IncumbentState) else inc
    if y_star is None:
        raise DomainError("Monte-Carlo improvement needs a defined incumbent")
    return float(y_star)


# ==================== Value Functions ====================

def qei_value(samples: SampleMatrix, inc) -> torch.Tensor:
    xi = _objective(samples)
    return (xi - _y_star(inc)).clamp_min(0.0).max(dim=-1).values.mean(dim=-1)


def qlogei_value(samples: SampleMatrix, inc, temps: Temperatures, fat: bool = True) -> torch.Tensor:
    xi = _objective(samples)
    return _reduce(_log_improvement(xi - _y_star(inc), temps, fat), temps, fat)


def qlogcei_value(
    samples_objective: SampleMatrix,
    samples_constraints: Sequence[SampleMatrix],
    inc,
    temps: Temperatures,
    thresholds: Optional[Sequence[float]] = None,
    fat: bool = True,
) -> torch.Tensor:
    xi = _objective(samples_objective)
    log_util = _log_improvement(xi - _y_star(inc), temps, fat)
    thresholds = thresholds if thresholds is not None else [0.0] * len(samples_constraints)
    for s, t in zip(samples_constraints, thresholds):
        log_util = log_util + _log_feasible(_objective(s) - t, temps, fat)
    return _reduce(log_util, temps, fat)


def qlognei_value(samples_joint: SampleMatrix, q: int, temps: Temperatures, fat: bool = True) -> torch.Tensor:
    """First q columns are candidates; the rest are observed designs whose per-draw max is the incumbent."""
    xi = _objective(samples_joint)
    if xi.shape[-1] <= q:
        raise DomainError("qLogNEI needs at least one observed design in the joint samples")
    y_star = xi[..., q:].max(dim=-1, keepdim=True).values
    return _reduce(_log_improvement(xi[..., :q] - y_star, temps, fat), temps, fat)


# ==================== Operations ====================

def qei_mc(samples: SampleMatrix, inc) -> torch.Tensor:
    """(1/N)·Σ_i max_j [ξ^i_j - y*]₊ with hard operations."""
    return qei_value(samples, inc)


def qlogei(samples: SampleMatrix, inc, temps: Optional[Temperatures] = None, fat: bool = True) -> AcqResult:
    """
    log of the smoothed batch EI estimator.

    With fat=True the per-draw improvement is log_fatplus and the max over
    candidates is fatmax; fat=False uses logsoftplus and
    tau_max·logsumexp(·/tau_max).
    """
    return _result(qlogei_value(samples, inc, temps or Temperatures(), fat), samples)


def qlogcei(samples_objective, samples_constraints, inc, temps: Optional[Temperatures] = None, thresholds=None, fat: bool = True) -> AcqResult:
    value = qlogcei_value(samples_objective, samples_constraints, inc, temps or Temperatures(), thresholds, fat)
    return _result(value, samples_objective)


def qlognei(samples_joint: SampleMatrix, q: int, temps: Optional[Temperatures] = None, fat: bool = True) -> AcqResult:
    return _result(qlognei_value(samples_joint, q, temps or Temperatures(), fat), samples_joint)


# ==================== Optimizer Adapter ====================

MC_NAMES = ("qei", "qlogei", "qlogcei", "qlognei")


class MCAcquisition:
    """
    Callable X (..., q, d) -> values (...) with frozen base samples.

    Base matrices are drawn once per (draws, width) from `seed` and reused for
    every evaluation, which makes the acquisition a deterministic function of X.
    """

    supports_batch = True

    def __init__(
        self,
        model: ModelList,
        name: str,
        incumbent: Optional[IncumbentState] = None,
        temps: Optional[Temperatures] = None,
        seed: int = 0,
        fat: bool = True,
        num_samples: Optional[int] = None,
        pending: Optional[torch.Tensor] = None,
        thresholds: Optional[Sequence[float]] = None,
        base_cache: Optional[dict] = None,
    ):
        if name not in MC_NAMES:
            raise ConfigError(f"unknown Monte-Carlo acquisition '{name}'")
        if name in ("qei", "qlogei") and (incumbent is None or not incumbent.defined):
            raise DomainError(f"{name} needs a defined incumbent")
        self.model = model
        self.name = name
        self.incumbent = incumbent
        self.temps = temps or Temperatures()
        self.seed = seed
        self.fat = fat
        self.num_samples = num_samples
        self.pending = None if pending is None else torch.as_tensor(pending, dtype=DTYPE).detach()
        if thresholds is None:
            thresholds = [float(model.data.standardize(0.0, m)) for m in range(1, model.num_outputs)]
        self.thresholds = list(thresholds)
        self._cache = base_cache if base_cache is not None else {}

    @property
    def d(self) -> int:
        return self.model.d

    def with_pending(self, pending: torch.Tensor) -> "MCAcquisition":
        return MCAcquisition(
            self.model, self.name, self.incumbent, self.temps, self.seed, self.fat,
            self.num_samples, pending, self.thresholds, self._cache,
        )

    def base_samples(self, num_samples: int, width: int) -> torch.Tensor:
        key = (num_samples, width)
        if key not in self._cache:
            self._cache[key] = draw_base_samples(num_samples, width, self.seed)
        return self._cache[key]

    def _samples(self, X: torch.Tensor, outputs: Sequence[int], q: int) -> SampleMatrix:
        post = self.model.posterior(X, outputs=outputs)
        n = self.num_samples or mc_samples_for(q)
        return sample(post, self.base_samples(n, post.mean.shape[-1]))

    def __call__(self, X) -> torch.Tensor:
        X = torch.as_tensor(X, dtype=DTYPE)
        q = X.shape[-2]
        joint = CandidateBatch(X, self.pending).joint() if self.pending is not None else X
        width = joint.shape[-2]

        if self.name == "qlognei":
            observed = self.model.data.inputs.expand(*joint.shape[:-2], -1, -1)
            s = self._samples(torch.cat([joint, observed], dim=-2), [0], q)
            return qlognei_value(s, width, self.temps, self.fat)

        if self.name == "qlogcei":
            s = self._samples(joint, list(range(self.model.num_outputs)), q)
            obj = SampleMatrix(s.samples[..., :1], s.base)
            cons = [SampleMatrix(s.samples[..., m:m + 1], s.base) for m in range(1, self.model.num_outputs)]
            if self.incumbent is None or not self.incumbent.defined:
                # no feasible observation yet: maximize the smoothed probability of feasibility
                log_util = torch.zeros_like(obj.samples[..., 0])
                for c, t in zip(cons, self.thresholds):
                    log_util = log_util + _log_feasible(_objective(c) - t, self.temps, self.fat)
                return _reduce(log_util, self.temps, self.fat)
            return qlogcei_value(obj, cons, self.incumbent, self.temps, self.thresholds, self.fat)

        s = self._samples(joint, [0], q)
        if self.name == "qei":
            return qei_value(s, self.incumbent)
        return qlogei_value(s, self.incumbent, self.temps, self.fat)
