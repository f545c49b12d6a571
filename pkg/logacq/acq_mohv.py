"""
Hypervolume Acquisitions
========================
Bi-objective hypervolume machinery (maximization): Pareto filtering, exact
staircase box decomposition of the non-dominated region, inclusion-exclusion
hypervolume improvement, and the hard qEHVI / smooth qLogEHVI acquisitions.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import torch

from .acq_analytic import AcqResult
from .acq_mc import CandidateBatch, Temperatures
from .errors import ConfigError, DomainError
from .settings import DTYPE, mc_samples_for
from .stable_math import _logdiffexp, fatmin, log_fatplus, logmeanexp, logsoftplus
from .surrogate import ModelList, SampleMatrix, draw_base_samples, sample

logger = logging.getLogger(__name__)

MAX_SUBSET_Q = 10
# log of the smallest normal double; floor for draws whose smoothed HVI sum is not positive
LOG_HVI_FLOOR = -745.0
UPPER_BOUND_PADDING = 0.1
# stands in for "not in the subset" inside the smooth minimum
_SENTINEL = 1e30


@dataclass(frozen=True)
class ParetoFrontier:
    """
    Mutually non-dominated points, sorted by the first objective descending.

    When `ref_point` is set every retained point strictly dominates it.
    """

    points: torch.Tensor
    ref_point: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class BoxDecomposition:
    """Disjoint boxes [lower_k, upper_k] covering the non-dominated part of [ref, upper_bound]."""

    lower: torch.Tensor
    upper: torch.Tensor
    upper_bound: torch.Tensor

    @property
    def num_boxes(self) -> int:
        return self.lower.shape[0]

    def volume(self) -> float:
        return float(torch.prod(self.upper - self.lower, dim=-1).sum())


@dataclass
class HviTerms:
    """Log-magnitudes of the inclusion-exclusion terms, split by sign."""

    log_positive: torch.Tensor
    log_negative: Optional[torch.Tensor]


def _as_points(Y) -> torch.Tensor:
    Y = torch.as_tensor(Y, dtype=DTYPE)
    if Y.numel() == 0:
        return Y.reshape(0, 2)
    if Y.dim() != 2 or Y.shape[-1] != 2:
        raise DomainError(f"expected an (n, 2) objective matrix, got shape {tuple(Y.shape)}")
    return Y


def _reference(P: ParetoFrontier, ref_point) -> torch.Tensor:
    ref = ref_point if ref_point is not None else P.ref_point
    if ref is None:
        raise DomainError("a reference point is required")
    ref = torch.as_tensor(ref, dtype=DTYPE).reshape(-1)
    if ref.numel() != 2:
        raise DomainError("the reference point must have two coordinates")
    return ref


# ==================== Frontier & Hypervolume ====================

def pareto_filter(Y, ref_point=None) -> ParetoFrontier:
    """
    Maximal non-dominated subset of Y by a sort-and-sweep.

    Duplicates collapse to one point. With `ref_point`, points that do not
    strictly dominate it are dropped first.
    """
    Y = _as_points(Y).detach()
    ref = None if ref_point is None else torch.as_tensor(ref_point, dtype=DTYPE)
    if ref is not None and Y.shape[0]:
        Y = Y[torch.all(Y > ref, dim=-1)]
    if Y.shape[0] == 0:
        return ParetoFrontier(Y.reshape(0, 2), ref)

    # sort by f1 descending, then f2 descending
    order = sorted(range(Y.shape[0]), key=lambda i: (-float(Y[i, 0]), -float(Y[i, 1])))
    keep = []
    best_f2 = -math.inf
    for i in order:
        if float(Y[i, 1]) > best_f2:
            keep.append(i)
            best_f2 = float(Y[i, 1])
    return ParetoFrontier(Y[keep], ref)


def hypervolume(P: ParetoFrontier, ref_point=None) -> float:
    """Exact 2-d hypervolume dominated by P and bounded below by the reference point."""
    ref = _reference(P, ref_point)
    points = P.points[torch.all(P.points > ref, dim=-1)] if len(P) else P.points
    volume = 0.0
    prev_f2 = float(ref[1])
    # points are sorted by f1 descending, so f2 increases along the sweep
    for y1, y2 in points.tolist():
        if y2 > prev_f2:
            volume += (y1 - float(ref[0])) * (y2 - prev_f2)
            prev_f2 = y2
    return volume


def default_upper_bound(Y, ref_point) -> torch.Tensor:
    """Componentwise max of the observed objectives padded by 10% of their range above the reference point."""
    ref = torch.as_tensor(ref_point, dtype=DTYPE)
    Y = _as_points(Y)
    if Y.shape[0] == 0:
        return ref + 1.0
    top = torch.maximum(Y.max(dim=0).values, ref)
    span = top - torch.minimum(Y.min(dim=0).values, ref)
    span = torch.where(span > 0, span, torch.ones_like(span))
    return top + UPPER_BOUND_PADDING * span


def box_decompose(P: ParetoFrontier, upper_bound, ref_point=None) -> BoxDecomposition:
    """
    Staircase partition of the region above the reference point that no point
    of P dominates, clipped at `upper_bound`: one slab right of the first point,
    one between each pair of neighbours, and one left of the last point.
    """
    ref = _reference(P, ref_point)
    U = torch.as_tensor(upper_bound, dtype=DTYPE)
    if torch.any(U <= ref):
        raise DomainError("upper bound must exceed the reference point in both objectives")
    points = P.points[torch.all(P.points > ref, dim=-1)] if len(P) else P.points
    # anything beyond the bound only shrinks the region to nothing on that side
    points = torch.minimum(points, U)

    lowers, uppers = [], []
    if points.shape[0] == 0:
        lowers.append(ref.clone())
        uppers.append(U.clone())
    else:
        a = points[:, 0].tolist()
        b = points[:, 1].tolist()
        r1, r2 = float(ref[0]), float(ref[1])
        U1, U2 = float(U[0]), float(U[1])
        lowers.append([a[0], r2])
        uppers.append([U1, U2])
        for i in range(len(a) - 1):
            lowers.append([a[i + 1], b[i]])
            uppers.append([a[i], U2])
        lowers.append([r1, b[-1]])
        uppers.append([a[-1], U2])
    lower = torch.as_tensor([list(map(float, l)) for l in lowers], dtype=DTYPE)
    upper = torch.as_tensor([list(map(float, u)) for u in uppers], dtype=DTYPE)
    keep = torch.all(upper > lower, dim=-1)
    return BoxDecomposition(lower=lower[keep], upper=upper[keep], upper_bound=U)


# ==================== Inclusion-Exclusion ====================

@lru_cache(maxsize=None)
def _subsets(q: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-empty subsets of range(q) as a (2^q - 1, q) mask plus their sizes."""
    masks = []
    for size in range(1, q + 1):
        for combo in itertools.combinations(range(q), size):
            row = [False] * q
            for j in combo:
                row[j] = True
            masks.append(row)
    mask = torch.tensor(masks, dtype=torch.bool)
    return mask, mask.sum(dim=-1)


def _check_q(q: int) -> None:
    if q > MAX_SUBSET_Q:
        raise ConfigError(f"inclusion-exclusion over q = {q} candidates exceeds the limit of {MAX_SUBSET_Q}")


def _subset_values(y: torch.Tensor, fill: float) -> tuple[torch.Tensor, torch.Tensor]:
    """y (..., N, q, 2) -> (..., N, S, q, 2) with non-members replaced by `fill`, plus subset sizes."""
    q = y.shape[-2]
    _check_q(q)
    mask, sizes = _subsets(q)
    ys = y.unsqueeze(-3)
    vals = torch.where(mask.unsqueeze(-1), ys, torch.full_like(ys, fill))
    return vals, sizes


def hvi_inclusion_exclusion(samples, P: Optional[ParetoFrontier], decomposition: BoxDecomposition) -> torch.Tensor:
    """
    Exact hypervolume improvement of each joint draw over P, inside the decomposition bounds.

    Args:
        samples: (..., N, q, 2) objective draws (raw scale, maximization) or a SampleMatrix
        P: the current frontier (its boxes are already encoded in `decomposition`)
        decomposition: boxes of the non-dominated region

    Returns:
        (..., N) improvements
    """
    y = samples.samples if isinstance(samples, SampleMatrix) else torch.as_tensor(samples, dtype=DTYPE)
    vals, sizes = _subset_values(y, math.inf)
    z = vals.min(dim=-2).values.unsqueeze(-3)
    z = torch.minimum(z, decomposition.upper.unsqueeze(-2))
    side = (z - decomposition.lower.unsqueeze(-2)).clamp_min(0.0)
    volume = side.prod(dim=-1)
    signs = torch.where(sizes % 2 == 1, 1.0, -1.0).to(DTYPE)
    return (volume * signs).sum(dim=(-1, -2))


def hvi_terms(y: torch.Tensor, decomposition: BoxDecomposition, temps: Temperatures, fat: bool = True) -> HviTerms:
    """Smoothed log-magnitudes of every (box, subset) term, split into odd/even subsets."""
    vals, sizes = _subset_values(y, _SENTINEL)
    K = decomposition.num_boxes
    u = decomposition.upper.view(K, 1, 1, 2)
    vals = vals.unsqueeze(-4).expand(*vals.shape[:-3], K, *vals.shape[-3:])
    u = u.expand(*vals.shape[:-2], 1, 2)
    stacked = torch.cat([vals, u], dim=-2)
    if fat:
        z = fatmin(stacked, tau=temps.tau_max, dim=-2)
    else:
        z = -temps.tau_max * torch.logsumexp(-stacked / temps.tau_max, dim=-2)
    side = z - decomposition.lower.view(K, 1, 2)
    if fat:
        log_side = log_fatplus(side, tau=temps.tau_0)
    else:
        log_side = logsoftplus(side, tau=temps.tau_0)
    log_term = log_side.sum(dim=-1)
    odd = (sizes % 2 == 1)
    flat_shape = (*log_term.shape[:-2], -1)
    log_pos = log_term[..., odd].reshape(flat_shape)
    log_neg = log_term[..., ~odd].reshape(flat_shape) if bool((~odd).any()) else None
    return HviTerms(
        log_positive=torch.logsumexp(log_pos, dim=-1),
        log_negative=None if log_neg is None else torch.logsumexp(log_neg, dim=-1),
    )


def count_clipped(y: torch.Tensor, decomposition: BoxDecomposition) -> int:
    """Number of candidate draws (..., N, q, 2) with an objective above the decomposition's upper bound."""
    beyond = (y.detach() > decomposition.upper_bound).any(dim=-1)
    return int(beyond.sum())


def _log_hvi_per_draw(terms: HviTerms) -> tuple[torch.Tensor, torch.Tensor]:
    pos = terms.log_positive
    if terms.log_negative is None:
        return pos, torch.zeros_like(pos, dtype=torch.bool)
    neg = terms.log_negative
    valid = pos > neg
    neg_safe = torch.where(valid, neg, pos - 1.0)
    log_hvi = _logdiffexp(pos, neg_safe)
    floor = torch.full_like(pos, LOG_HVI_FLOOR)
    return torch.where(valid, log_hvi, floor), ~valid


# ==================== Acquisitions ====================

def qehvi_mc(samples, P: Optional[ParetoFrontier], decomposition: BoxDecomposition) -> torch.Tensor:
    """Mean hard hypervolume improvement over draws."""
    return hvi_inclusion_exclusion(samples, P, decomposition).mean(dim=-1)


def qlogehvi_value(y: torch.Tensor, decomposition: BoxDecomposition, temps: Temperatures, fat: bool = True, log_expected: bool = False) -> tuple[torch.Tensor, int]:
    log_hvi, clamped = _log_hvi_per_draw(hvi_terms(y, decomposition, temps, fat))
    n_clamped = int(clamped.sum())
    if log_expected:
        value = log_hvi.mean(dim=-1)
    else:
        value = logmeanexp(log_hvi, dim=-1)
    return value, n_clamped


def qlogehvi(samples: SampleMatrix, P: Optional[ParetoFrontier], decomposition: BoxDecomposition, temps: Optional[Temperatures] = None, fat: bool = True, log_expected: bool = False) -> AcqResult:
    """
    log of the smoothed expected hypervolume improvement.

    Each inclusion-exclusion term becomes Σ_m log_fatplus(fatmin(u_k, y_S) - l_k);
    odd and even subsets are accumulated with logsumexp and combined by
    logdiffexp. Draws whose negative part is not smaller than the positive part
    are floored at LOG_HVI_FLOOR and counted in `info["clamped_draws"]`;
    candidate draws above the upper bound are counted in `info["clipped_draws"]`.
    With `log_expected` the draw-mean of per-draw log-HVI is returned instead.
    """
    value, n_clamped = qlogehvi_value(samples.samples, decomposition, temps or Temperatures(), fat, log_expected)
    if n_clamped:
        logger.warning("qLogEHVI clamped %d draws with non-positive smoothed improvement", n_clamped)
    n_clipped = count_clipped(samples.samples, decomposition)
    if n_clipped:
        logger.warning("qLogEHVI clipped %d candidate draws at the objective upper bound", n_clipped)
    grad = None
    X = samples.X
    if X is not None and X.requires_grad and value.requires_grad:
        (grad,) = torch.autograd.grad(value.sum(), X, retain_graph=True)
    return AcqResult(value.detach(), grad, info={"clamped_draws": n_clamped, "clipped_draws": n_clipped})


EHVI_NAMES = ("qehvi", "qlogehvi")


class EHVIAcquisition:
    """
    Callable X (..., q, d) -> values (...) for the first two model outputs.

    Posterior draws are mapped back to the raw objective scale before they meet
    the frontier and boxes, which live in raw (maximization) coordinates.
    """

    supports_batch = True

    def __init__(
        self,
        model: ModelList,
        name: str,
        frontier: ParetoFrontier,
        decomposition: BoxDecomposition,
        temps: Optional[Temperatures] = None,
        seed: int = 0,
        fat: bool = True,
        log_expected: bool = False,
        num_samples: Optional[int] = None,
        pending: Optional[torch.Tensor] = None,
        base_cache: Optional[dict] = None,
    ):
        if name not in EHVI_NAMES:
            raise ConfigError(f"unknown hypervolume acquisition '{name}'")
        if model.num_outputs < 2:
            raise ConfigError("hypervolume acquisitions need two objective models")
        self.model = model
        self.name = name
        self.frontier = frontier
        self.decomposition = decomposition
        self.temps = temps or Temperatures()
        self.seed = seed
        self.fat = fat
        self.log_expected = log_expected
        self.num_samples = num_samples
        self.pending = None if pending is None else torch.as_tensor(pending, dtype=DTYPE).detach()
        self._cache = base_cache if base_cache is not None else {}
        self.clamped_draws = 0
        self.clipped_draws = 0

    @property
    def d(self) -> int:
        return self.model.d

    def with_pending(self, pending: torch.Tensor) -> "EHVIAcquisition":
        return EHVIAcquisition(
            self.model, self.name, self.frontier, self.decomposition, self.temps, self.seed,
            self.fat, self.log_expected, self.num_samples, pending, self._cache,
        )

    def _raw_samples(self, X: torch.Tensor, q: int) -> torch.Tensor:
        post = self.model.posterior(X, outputs=[0, 1])
        n = self.num_samples or mc_samples_for(q)
        key = (n, post.mean.shape[-1])
        if key not in self._cache:
            self._cache[key] = draw_base_samples(n, key[1], self.seed)
        y = sample(post, self._cache[key]).samples
        data = self.model.data
        return y * data.y_std[:2] + data.y_mean[:2]

    def __call__(self, X) -> torch.Tensor:
        X = torch.as_tensor(X, dtype=DTYPE)
        q = X.shape[-2]
        joint = CandidateBatch(X, self.pending).joint() if self.pending is not None else X
        y = self._raw_samples(joint, q)
        if self.name == "qehvi":
            return qehvi_mc(y, self.frontier, self.decomposition)
        value, n_clamped = qlogehvi_value(y, self.decomposition, self.temps, self.fat, self.log_expected)
        self.clamped_draws += n_clamped
        self.clipped_draws += count_clipped(y, self.decomposition)
        return value
