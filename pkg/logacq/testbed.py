"""
Testbed
=======
Synthetic benchmark problems with known structure: single-objective test
functions, a constrained toy suite with closed-form optima, and bi-objective
problems with published reference points.

Every problem is exposed in the maximization sense on the unit cube. Outputs
of `evaluate` are laid out as [objectives..., constraints...]; a constraint is
satisfied when its value is <= 0.
"""

import logging
import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Sobol points used to estimate an objective's range when none is published
RANGE_SOBOL_LOG2 = 12


@dataclass(frozen=True)
class KnownOptimum:
    """Best attainable value (maximization sense) and where it comes from."""

    value: float
    provenance: str
    location: Optional[tuple[float, ...]] = None


def bilog(y):
    """sign(y)·log(1 + |y|); monotone, odd, and zero at zero."""
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.log1p(np.abs(y))


# ==================== Base Problem ====================

class Problem(ABC):
    """
    A deterministic benchmark problem on a finite native box.

    Subclasses implement `_evaluate_native` for a single native point and
    return objectives already negated where the native problem is a
    minimization.
    """

    num_objectives: int = 1
    num_constraints: int = 0

    def __init__(self, name: str, dim: int, lower, upper, known_optimum: Optional[KnownOptimum] = None):
        if dim < 1:
            raise ConfigError(f"{name}: dimension must be at least 1, got {dim}")
        self.name = name
        self.dim = dim
        self.lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), (dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), (dim,)).copy()
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)) and np.all(self.upper > self.lower)):
            raise ConfigError(f"{name}: bounds must be finite with upper > lower")
        self.known_optimum = known_optimum
        self.ref_point: Optional[np.ndarray] = None

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, dim={self.dim})"

    @property
    def num_outputs(self) -> int:
        return self.num_objectives + self.num_constraints

    @property
    def is_multi_objective(self) -> bool:
        return self.num_objectives > 1

    def to_native(self, u) -> np.ndarray:
        """Affine map [0, 1]^d -> native box."""
        u = np.asarray(u, dtype=np.float64)
        return self.lower + u * (self.upper - self.lower)

    def to_unit(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.lower) / (self.upper - self.lower)

    @abstractmethod
    def _evaluate_native(self, x: np.ndarray) -> np.ndarray:
        ...

    def evaluate_native(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ConfigError(f"{self.name} expects {self.dim}-dimensional points, got {x.shape[-1]}")
        if x.ndim == 1:
            return np.atleast_1d(self._evaluate_native(x)).astype(np.float64)
        return np.stack([np.atleast_1d(self._evaluate_native(row)) for row in x]).astype(np.float64)

    def evaluate(self, u) -> np.ndarray:
        """Outputs at unit-cube point(s) u of shape (d,) or (n, d)."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.dim:
            raise ConfigError(f"{self.name} expects {self.dim}-dimensional points, got {u.shape[-1]}")
        return self.evaluate_native(self.to_native(u))

    def is_feasible(self, outputs) -> np.ndarray:
        outputs = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
        if self.num_constraints == 0:
            return np.ones(outputs.shape[0], dtype=bool)
        return np.all(outputs[:, self.num_objectives:] <= 0.0, axis=1)

    @cached_property
    def value_range(self) -> np.ndarray:
        """
        Per-objective range max - min over the domain, estimated on a fixed
        scrambled Sobol design and widened to include the known optimum.
        """
        grid = qmc.Sobol(self.dim, scramble=True, seed=0).random_base2(RANGE_SOBOL_LOG2)
        values = self.evaluate(grid)[:, : self.num_objectives]
        hi = values.max(axis=0)
        lo = values.min(axis=0)
        if self.known_optimum is not None and not self.is_multi_objective:
            hi = np.maximum(hi, self.known_optimum.value)
        return hi - lo

    def optimum_unit_location(self) -> Optional[np.ndarray]:
        if self.known_optimum is None or self.known_optimum.location is None:
            return None
        return self.to_unit(np.asarray(self.known_optimum.location))


# ==================== Single-Objective ====================

class SumOfSquares(Problem):
    """f(x) = Σ (x_i - 0.5)² on [0, 1]^d, maximized as -f."""

    def __init__(self, dim: int = 10):
        super().__init__(f"sum_of_squares{dim}", dim, 0.0, 1.0, KnownOptimum(0.0, "closed_form", (0.5,) * dim))

    def _evaluate_native(self, x):
        return -np.sum((x - 0.5) ** 2)


class Ackley(Problem):
    def __init__(self, dim: int = 16):
        super().__init__(f"ackley{dim}", dim, -32.768, 32.768, KnownOptimum(0.0, "closed_form", (0.0,) * dim))

    def _evaluate_native(self, x):
        n = float(len(x))
        f = (
            -20.0 * np.exp(-0.2 * np.sqrt(np.sum(x ** 2) / n))
            - np.exp(np.sum(np.cos(2.0 * np.pi * x)) / n)
            + 20.0
            + np.e
        )
        return -f


# published minima of the m = 10 Michalewicz function
MICHALEWICZ_MINIMA = {2: -1.8013034, 5: -4.687658, 10: -9.66015}


class Michalewicz(Problem):
    def __init__(self, dim: int = 10, steepness: int = 10):
        opt = None
        if steepness == 10 and dim in MICHALEWICZ_MINIMA:
            opt = KnownOptimum(-MICHALEWICZ_MINIMA[dim], "published")
        super().__init__(f"michalewicz{dim}", dim, 0.0, math.pi, opt)
        self.steepness = steepness

    def _evaluate_native(self, x):
        i = np.arange(1, self.dim + 1)
        f = -np.sum(np.sin(x) * np.sin(i * x ** 2 / np.pi) ** (2 * self.steepness))
        return -f


class Levy(Problem):
    def __init__(self, dim: int = 10):
        super().__init__(f"levy{dim}", dim, -10.0, 10.0, KnownOptimum(0.0, "closed_form", (1.0,) * dim))

    def _evaluate_native(self, x):
        w = 1.0 + (x - 1.0) / 4.0
        head = np.sin(np.pi * w[0]) ** 2
        body = np.sum((w[:-1] - 1.0) ** 2 * (1.0 + 10.0 * np.sin(np.pi * w[:-1] + 1.0) ** 2))
        tail = (w[-1] - 1.0) ** 2 * (1.0 + np.sin(2.0 * np.pi * w[-1]) ** 2)
        return -(head + body + tail)


HARTMANN6_A = np.array([
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
])
HARTMANN6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])
HARTMANN6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN6_ARGMIN = (0.20168952, 0.15001069, 0.47687398, 0.27533243, 0.31165162, 0.65730054)


class Hartmann6(Problem):
    """Six-dimensional Hartmann function on [0, 1]^6; global minimum ≈ -3.32237."""

    def __init__(self):
        super().__init__(
            "hartmann6", 6, 0.0, 1.0,
            KnownOptimum(3.32236801141551, "published, reproduced by local polish", HARTMANN6_ARGMIN),
        )

    def _evaluate_native(self, x):
        inner = np.sum(HARTMANN6_A * (x - HARTMANN6_P) ** 2, axis=1)
        return np.sum(HARTMANN6_ALPHA * np.exp(-inner))


# ==================== Constrained Suite ====================

TARGET = 0.7
BALL_CENTER = 0.3
BALL_RADIUS = 0.3
HALFSPACE_LEVEL = 0.5


class ConstrainedQuadratic(Problem):
    """
    Maximize -‖x - 0.7·1‖² on [0, 1]^d subject to any of

    - ball: ‖x - 0.3·1‖² - 0.3² <= 0
    - halfspace: Σ x_i - 0.5·d <= 0
    - loose ball: ‖x - 0.7·1‖² - 0.5² <= 0 (never active)

    The problem is symmetric under coordinate permutations, so the optimum lies
    on the diagonal x = t·1 with t the largest value every constraint admits.
    """

    def __init__(self, variant: str, dim: int = 2):
        kinds = {
            "ball": ("ball",),
            "halfspace": ("halfspace",),
            "ball_halfspace": ("ball", "halfspace"),
            "feasible": ("loose",),
        }
        if variant not in kinds:
            raise ConfigError(f"unknown constrained variant '{variant}'")
        self.kinds = kinds[variant]
        self.num_constraints = len(self.kinds)
        t = TARGET
        if "ball" in self.kinds:
            t = min(t, BALL_CENTER + BALL_RADIUS / math.sqrt(dim))
        if "halfspace" in self.kinds:
            t = min(t, HALFSPACE_LEVEL)
        value = -dim * (TARGET - t) ** 2
        super().__init__(f"constrained_{variant}{dim}", dim, 0.0, 1.0, KnownOptimum(value, "closed_form", (t,) * dim))

    def _constraint(self, kind: str, x: np.ndarray) -> float:
        if kind == "ball":
            return float(np.sum((x - BALL_CENTER) ** 2) - BALL_RADIUS ** 2)
        if kind == "halfspace":
            return float(np.sum(x) - HALFSPACE_LEVEL * self.dim)
        return float(np.sum((x - TARGET) ** 2) - 0.25)

    def _evaluate_native(self, x):
        objective = -np.sum((x - TARGET) ** 2)
        return np.array([objective] + [self._constraint(k, x) for k in self.kinds])


def constrained_toy_suite(dim: int = 2) -> list[Problem]:
    return [ConstrainedQuadratic(v, dim) for v in ("ball", "halfspace", "ball_halfspace", "feasible")]


# ==================== Multi-Objective ====================

class BraninCurrin(Problem):
    """Branin and Currin on [0, 1]^2, both minimized natively; reference point (18, 6)."""

    num_objectives = 2

    def __init__(self):
        super().__init__("branin_currin", 2, 0.0, 1.0, KnownOptimum(59.36011874867746, "published max hypervolume"))
        self.ref_point = np.array([-18.0, -6.0])

    def _evaluate_native(self, x):
        x1, x2 = 15.0 * x[0] - 5.0, 15.0 * x[1]
        branin = (
            (x2 - 5.1 / (4 * np.pi ** 2) * x1 ** 2 + 5.0 / np.pi * x1 - 6.0) ** 2
            + 10.0 * (1.0 - 1.0 / (8.0 * np.pi)) * np.cos(x1)
            + 10.0
        )
        u, v = x[0], x[1]
        # exp(-1/(2v)) -> 0 as v -> 0
        decay = np.exp(-1.0 / (2.0 * v)) if v > 0 else 0.0
        currin = (1.0 - decay) * (2300 * u ** 3 + 1900 * u ** 2 + 2092 * u + 60) / (100 * u ** 3 + 500 * u ** 2 + 4 * u + 20)
        return np.array([-branin, -currin])


class ZDT1(Problem):
    num_objectives = 2

    def __init__(self, dim: int = 6):
        if dim < 2:
            raise ConfigError("zdt1 needs at least two inputs")
        super().__init__("zdt1", dim, 0.0, 1.0, KnownOptimum(120.0 + 2.0 / 3.0, "closed_form max hypervolume"))
        self.ref_point = np.array([-11.0, -11.0])

    def _evaluate_native(self, x):
        f1 = x[0]
        g = 1.0 + 9.0 / (self.dim - 1) * np.sum(x[1:])
        f2 = g * (1.0 - np.sqrt(f1 / g))
        return np.array([-f1, -f2])


class DTLZ2(Problem):
    num_objectives = 2

    def __init__(self, dim: int = 6):
        if dim < 2:
            raise ConfigError("dtlz2 needs at least two inputs")
        super().__init__("dtlz2", dim, 0.0, 1.0, KnownOptimum(1.21 - math.pi / 4.0, "closed_form max hypervolume"))
        self.ref_point = np.array([-1.1, -1.1])

    def _evaluate_native(self, x):
        g = np.sum((x[1:] - 0.5) ** 2)
        angle = x[0] * np.pi / 2.0
        return np.array([-(1.0 + g) * np.cos(angle), -(1.0 + g) * np.sin(angle)])


def moo_suite() -> list[Problem]:
    return [BraninCurrin(), ZDT1(), DTLZ2()]


# ==================== Registry ====================

_FAMILIES: dict[str, Callable[[Optional[int]], Problem]] = {
    "sum_of_squares": lambda d: SumOfSquares(d or 10),
    "ackley": lambda d: Ackley(d or 16),
    "michalewicz": lambda d: Michalewicz(d or 10),
    "levy": lambda d: Levy(d or 10),
    "constrained_ball": lambda d: ConstrainedQuadratic("ball", d or 2),
    "constrained_halfspace": lambda d: ConstrainedQuadratic("halfspace", d or 2),
    "constrained_ball_halfspace": lambda d: ConstrainedQuadratic("ball_halfspace", d or 2),
    "constrained_feasible": lambda d: ConstrainedQuadratic("feasible", d or 2),
}

# names whose trailing digits are part of the name
_FIXED: dict[str, Callable[[], Problem]] = {
    "hartmann6": Hartmann6,
    "branin_currin": BraninCurrin,
    "zdt1": ZDT1,
    "dtlz2": DTLZ2,
}

PROBLEM_NAMES = (
    "sum_of_squares<d>", "ackley<d>", "michalewicz<d>", "levy<d>", "hartmann6",
    "constrained_ball<d>", "constrained_halfspace<d>", "constrained_ball_halfspace<d>",
    "constrained_feasible<d>", "branin_currin", "zdt1", "dtlz2",
)

_NAME_RE = re.compile(r"^([a-z_]+?)(\d*)$")


def get_problem(name: str) -> Problem:
    """
    Resolve a `<family><dim>` string such as `ackley16` or `constrained_ball2`.

    Raises:
        ConfigError: for unknown families or unsupported dimensions
    """
    key = name.strip().lower()
    if key in _FIXED:
        return _FIXED[key]()
    match = _NAME_RE.match(key)
    problem = None
    if match:
        family, digits = match.groups()
        builder = _FAMILIES.get(family)
        if builder is not None:
            problem = builder(int(digits) if digits else None)
    if problem is None:
        raise ConfigError(f"unknown problem '{name}'; registered: {', '.join(PROBLEM_NAMES)}")
    return problem
