"""
Stable Math
===========
Special functions and smooth fat-tailed relaxations used by every acquisition.

All functions accept Python floats or tensors and return float64 tensors that
stay differentiable with autograd. Two-branch functions evaluate each branch on
masked inputs so the branch that is not selected can never produce inf/nan
gradients.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Union

import torch

from .errors import DomainError
from .settings import DTYPE, ORACLE_PATH

logger = logging.getLogger(__name__)

Scalar = Union[float, int, torch.Tensor]

LOG2 = math.log(2.0)
SQRT2 = math.sqrt(2.0)
# γ = √(1/3), inflection point of the Lorentzian used by the fat sigmoid
FAT_GAMMA = math.sqrt(1.0 / 3.0)
# Strict-convexity bound of the fat softplus: e^{-γ} / (1 + e^{-γ})² / 2 ≈ 0.115135
FAT_ALPHA_BOUND = math.exp(-FAT_GAMMA) / (1.0 + math.exp(-FAT_GAMMA)) ** 2 / 2.0
DEFAULT_FAT_ALPHA = 0.1
# logerfc switches from log1p(-erf(x)) to log(erfcx(x)) - x² here rather than at 0:
# for small positive x, log(erfcx(x)) sits next to log(1) and loses relative accuracy
LOGERFC_SWITCH = 0.5


@dataclass(frozen=True)
class StableConstants:
    """Precision-dependent constants, derived from the working float width."""

    c1: float
    c2: float
    eps: float
    softplus_branch_l: float
    inv_sqrt_eps: float

    @classmethod
    def for_dtype(cls, dtype: torch.dtype = DTYPE) -> "StableConstants":
        eps = torch.finfo(dtype).eps
        return cls(
            c1=math.log(2.0 * math.pi) / 2.0,
            c2=math.log(math.pi / 2.0) / 2.0,
            eps=eps,
            # dropped second-order term e^l / 2 of the lower logsoftplus branch equals eps
            softplus_branch_l=math.log(2.0 * eps),
            inv_sqrt_eps=1.0 / math.sqrt(eps),
        )


CONSTANTS = StableConstants.for_dtype()


@dataclass(frozen=True)
class FatAlpha:
    """Lorentzian weight of the fat softplus, validated against the convexity bound."""

    alpha: float = DEFAULT_FAT_ALPHA

    def __post_init__(self):
        if not (0.0 <= self.alpha < FAT_ALPHA_BOUND):
            raise DomainError(
                f"fat softplus alpha must lie in [0, {FAT_ALPHA_BOUND:.6f}), got {self.alpha}"
            )


def _as_tensor(x: Scalar) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def _alpha_value(alpha: Union[FatAlpha, float]) -> float:
    if isinstance(alpha, FatAlpha):
        return alpha.alpha
    return FatAlpha(float(alpha)).alpha


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0.0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return tau


# ==================== Special Functions ====================

def _log1mexp(x: torch.Tensor) -> torch.Tensor:
    near_zero = x > -LOG2
    x_hi = torch.where(near_zero, x, torch.full_like(x, -1.0))
    x_lo = torch.where(near_zero, torch.full_like(x, -1.0), x)
    return torch.where(
        near_zero,
        torch.log(-torch.expm1(x_hi)),
        torch.log1p(-torch.exp(x_lo)),
    )


def log1mexp(x: Scalar) -> torch.Tensor:
    """
    log(1 - e^x) for x < 0, accurate on both sides of x = -log 2.

    Raises:
        DomainError: if any element is >= 0
    """
    x = _as_tensor(x)
    if torch.any(x >= 0):
        raise DomainError("log1mexp requires x < 0")
    return _log1mexp(x)


def erfcx(x: Scalar) -> torch.Tensor:
    """Scaled complementary error function e^(x²)·erfc(x)."""
    return torch.special.erfcx(_as_tensor(x))


def log_ndtr(z: Scalar) -> torch.Tensor:
    """log Φ(z), finite far into the lower tail (≈ -z²/2 - log(-z) - log(2π)/2)."""
    return torch.special.log_ndtr(_as_tensor(z))


def logerfc(x: Scalar) -> torch.Tensor:
    """
    log(erfc(x)).

    Below LOGERFC_SWITCH the value is log(erfc(x)) evaluated as log1p(-erf(x)),
    which keeps full relative accuracy near the root at x = 0; above it the
    scaled form log(erfcx(x)) - x² avoids underflow of erfc.
    """
    x = _as_tensor(x)
    small = x < LOGERFC_SWITCH
    x_s = torch.where(small, x, torch.zeros_like(x))
    x_l = torch.where(small, torch.ones_like(x), x)
    return torch.where(
        small,
        torch.log1p(-torch.special.erf(x_s)),
        torch.log(torch.special.erfcx(x_l)) - x_l * x_l,
    )


def logsumexp(v: Scalar, dim: int = -1) -> torch.Tensor:
    """
    log Σ e^(v_i) along `dim` with max-subtraction.

    Raises:
        DomainError: on empty input
    """
    v = _as_tensor(v)
    if v.dim() == 0:
        v = v.unsqueeze(0)
    if v.numel() == 0 or v.shape[dim] == 0:
        raise DomainError("logsumexp of an empty vector")
    return torch.logsumexp(v, dim=dim)


def logmeanexp(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """log of the mean of e^(v_i) along `dim`."""
    return logsumexp(v, dim=dim) - math.log(v.shape[dim])


def _softplus(u: torch.Tensor) -> torch.Tensor:
    return torch.logaddexp(u, torch.zeros_like(u))


def _logsoftplus_unit(u: torch.Tensor) -> torch.Tensor:
    branch_l = CONSTANTS.softplus_branch_l
    upper = u > branch_l
    u_up = torch.where(upper, u, torch.full_like(u, branch_l))
    return torch.where(upper, torch.log(_softplus(u_up)), u)


def logsoftplus(x: Scalar, tau: float = 1.0) -> torch.Tensor:
    """
    log(softplus_tau(x)) = log(tau · log(1 + e^(x/tau))).

    For x/tau <= softplus_branch_l the value is x/tau + log(tau); the dropped
    term is O(e^(2x/tau)).
    """
    tau = _check_tau(tau)
    u = _as_tensor(x) / tau
    return _logsoftplus_unit(u) + math.log(tau)


def _log1p_square(u: torch.Tensor) -> torch.Tensor:
    # log(1 + u²) without overflowing u² for huge |u|
    big = u.abs() > 1.0
    u_b = torch.where(big, u, torch.full_like(u, 2.0))
    u_s = torch.where(big, torch.zeros_like(u), u)
    return torch.where(
        big,
        2.0 * torch.log(u_b.abs()) + torch.log1p(u_b.pow(-2)),
        torch.log1p(u_s * u_s),
    )


# ==================== Fat-Tailed Relaxations ====================

def fatplus(x: Scalar, tau: float = 1.0, alpha: Union[FatAlpha, float] = DEFAULT_FAT_ALPHA) -> torch.Tensor:
    """tau · φ₊(x/tau), with φ₊(u) = alpha/(1+u²) + log(1+e^u)."""
    tau = _check_tau(tau)
    a = _alpha_value(alpha)
    u = _as_tensor(x) / tau
    return tau * (a / (1.0 + u * u) + _softplus(u))


def log_fatplus(x: Scalar, tau: float = 1.0, alpha: Union[FatAlpha, float] = DEFAULT_FAT_ALPHA) -> torch.Tensor:
    """
    log(tau · φ₊(x/tau)).

    In the left tail the Lorentzian dominates, so the log decays like
    log(tau·alpha) - 2·log(|x|/tau) and its gradient stays polynomial.
    """
    tau = _check_tau(tau)
    a = _alpha_value(alpha)
    u = _as_tensor(x) / tau
    log_sp = _logsoftplus_unit(u)
    if a > 0.0:
        log_sp = torch.logaddexp(math.log(a) - _log1p_square(u), log_sp)
    return log_sp + math.log(tau)


def fatmax(v: Scalar, tau: float = 1.0, dim: int = -1) -> torch.Tensor:
    """
    Smooth maximum with Lorentzian weights:
    max_j v_j + tau · log Σ_i [1 + ((v_i - max_j v_j)/tau)²]^(-1).

    Bounded by max(v) <= fatmax(v) <= max(v) + tau·log(d).
    """
    tau = _check_tau(tau)
    v = _as_tensor(v)
    if v.dim() == 0:
        v = v.unsqueeze(0)
    if v.numel() == 0 or v.shape[dim] == 0:
        raise DomainError("fatmax of an empty vector")
    v_max = v.max(dim=dim, keepdim=True).values
    w = (v - v_max) / tau
    return v_max.squeeze(dim) + tau * torch.logsumexp(-_log1p_square(w), dim=dim)


def fatmin(v: Scalar, tau: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Smooth minimum, -fatmax(-v)."""
    return -fatmax(-_as_tensor(v), tau=tau, dim=dim)


def fatsigmoid(x: Scalar, tau: float = 1.0) -> torch.Tensor:
    """
    Fat sigmoid ι(x/tau) built from two Lorentzians spliced at γ = √(1/3):
    (2/3)/(1 + (u-γ)²) for u < 0 and 1 - (2/3)/(1 + (u+γ)²) for u >= 0.
    """
    tau = _check_tau(tau)
    u = _as_tensor(x) / tau
    neg = u < 0
    u_n = torch.where(neg, u, -torch.ones_like(u))
    u_p = torch.where(neg, torch.ones_like(u), u)
    return torch.where(
        neg,
        (2.0 / 3.0) / (1.0 + (u_n - FAT_GAMMA) ** 2),
        1.0 - (2.0 / 3.0) / (1.0 + (u_p + FAT_GAMMA) ** 2),
    )


def log_fatsigmoid(x: Scalar, tau: float = 1.0) -> torch.Tensor:
    """log ι(x/tau), finite for every representable x."""
    tau = _check_tau(tau)
    u = _as_tensor(x) / tau
    neg = u < 0
    u_n = torch.where(neg, u, -torch.ones_like(u))
    u_p = torch.where(neg, torch.ones_like(u), u)
    return torch.where(
        neg,
        math.log(2.0 / 3.0) - _log1p_square(u_n - FAT_GAMMA),
        torch.log1p(-(2.0 / 3.0) / (1.0 + (u_p + FAT_GAMMA) ** 2)),
    )


def _logdiffexp(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + _log1mexp(b - a)


def logdiffexp(a: Scalar, b: Scalar) -> torch.Tensor:
    """
    log(e^a - e^b) for a > b.

    Raises:
        DomainError: if a <= b anywhere (the difference would be zero or negative)
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if torch.any(a <= b):
        raise DomainError("logdiffexp requires a > b")
    return _logdiffexp(a, b)


# ==================== Oracle Fixture ====================

@dataclass
class OracleRow:
    function: str
    x: float
    reference: float
    value: float = float("nan")
    rel_error: float = float("nan")
    tolerance: float = 1e-12


@dataclass
class OracleReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    failures: list[OracleRow] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _oracle_functions() -> dict:
    from .acq_analytic import log_h

    return {
        "log1mexp": log1mexp,
        "erfcx": erfcx,
        "log_ndtr": log_ndtr,
        "logerfc": logerfc,
        "logsoftplus": logsoftplus,
        "log_h": log_h,
    }


def load_oracles(path: str = ORACLE_PATH) -> list[OracleRow]:
    """Read `function<TAB>input<TAB>reference` rows, skipping blanks and # comments."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"oracle fixture not found: {path}")
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            rows.append(OracleRow(function=parts[0], x=float(parts[1]), reference=float(parts[2])))
    return rows


def _tolerance_for(row: OracleRow, rel_tol: float, log_h_mid_tol: float) -> float:
    if row.function == "log_h" and -CONSTANTS.inv_sqrt_eps < row.x <= -1.0:
        return log_h_mid_tol
    return rel_tol


def verify_oracles(path: str = ORACLE_PATH, rel_tol: float = 1e-12, log_h_mid_tol: float = 1e-9) -> OracleReport:
    """Re-evaluate every fixture row and collect the max relative error per function."""
    functions = _oracle_functions()
    report = OracleReport()
    for row in load_oracles(path):
        fn = functions.get(row.function)
        if fn is None:
            raise ValueError(f"unknown oracle function: {row.function}")
        row.value = float(fn(row.x))
        row.rel_error = abs(row.value - row.reference) / max(abs(row.reference), 1e-300)
        row.tolerance = _tolerance_for(row, rel_tol, log_h_mid_tol)
        report.max_rel_error[row.function] = max(report.max_rel_error.get(row.function, 0.0), row.rel_error)
        report.counts[row.function] = report.counts.get(row.function, 0) + 1
        if not row.rel_error <= row.tolerance:
            report.failures.append(row)
    if report.failures:
        logger.warning("%d oracle rows exceed tolerance", len(report.failures))
    return report
