"""
Acquisition Optimizer Unit Tests
================================
Bound-constrained local solves, restart initialization and the multi-start
driver in joint and sequential-greedy modes.
"""

import math
import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from logacq.acq_analytic import AnalyticAcquisition, IncumbentState
from logacq.acq_mc import MCAcquisition
from logacq.acq_opt import OptimConfig, initialize, lbfgsb_local, optimize_acq
from logacq.errors import ConfigError, OptimizationError
from logacq.settings import DTYPE
from logacq.surrogate import DataSet, GPHyperparams, GPModel, ModelList


def make_model(d: int = 2, n: int = 6, seed: int = 0) -> ModelList:
    gen = torch.Generator().manual_seed(seed)
    X = torch.rand(n, d, generator=gen, dtype=DTYPE)
    y = torch.sin(5.0 * X).sum(-1)
    data = DataSet.from_raw(X.numpy(), y.numpy())
    return ModelList([GPModel(GPHyperparams(lengthscales=[0.2] * d, noise_variance=1e-4), data)])


class Quadratic:
    """-(x - c)² summed over coordinates; maximized at c."""

    supports_batch = True
    d = 2

    def __init__(self, center=0.5):
        self.center = center

    def __call__(self, X):
        X = torch.as_tensor(X, dtype=DTYPE)
        return -((X - self.center) ** 2).sum(dim=(-1, -2))

    def with_pending(self, pending):
        return self


def numpy_objective(fn):
    def objective(x):
        t = torch.tensor(x, dtype=DTYPE, requires_grad=True)
        value = fn(t)
        (g,) = torch.autograd.grad(value, t)
        return float(value), g.numpy()
    return objective


class TestLocalSolver:
    """L-BFGS-B inside the unit box"""

    def test_concave_quadratic(self):
        """Reaches the interior maximum quickly"""
        res = lbfgsb_local(numpy_objective(lambda x: -((x - 0.5) ** 2).sum()), np.full(2, 0.1))
        assert np.allclose(res.x, 0.5, atol=1e-8)
        assert res.iterations <= 30

    def test_boundary_maximum(self):
        """Linear objective ends at the upper corner"""
        res = lbfgsb_local(numpy_objective(lambda x: x.sum()), np.full(3, 0.2))
        assert np.allclose(res.x, 1.0)
        assert res.value == pytest.approx(3.0)

    def test_rosenbrock(self):
        """Rescaled Rosenbrock maximum is 0 at u = (0.75, 0.75)"""
        def neg_rosen(u):
            x = 4.0 * u - 2.0
            return -(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)

        res = lbfgsb_local(numpy_objective(neg_rosen), np.array([0.3, 0.6]), OptimConfig(max_iters=500))
        assert res.value == pytest.approx(0.0, abs=1e-6)
        assert np.allclose(res.x, 0.75, atol=1e-3)

    def test_non_finite_start(self):
        with pytest.raises(OptimizationError):
            lbfgsb_local(lambda x: (float("nan"), np.zeros_like(x)), np.full(2, 0.5))

    def test_custom_bounds(self):
        res = lbfgsb_local(numpy_objective(lambda x: -((x - 3.0) ** 2).sum()), np.zeros(1), bounds=np.array([[-1.0, 2.0]]))
        assert res.x[0] == pytest.approx(2.0)

    def test_never_worse_than_start(self):
        res = lbfgsb_local(numpy_objective(lambda x: -((x - 0.5) ** 2).sum()), np.full(2, 0.5))
        assert res.value >= 0.0 - 1e-15


class TestInitialization:
    """Restart point selection"""

    def test_uniform_shape_and_determinism(self):
        config = OptimConfig(n_restarts=5, raw_candidates=20)
        a, fell_back = initialize(Quadratic(), None, config, seed=3, q=2)
        b, _ = initialize(Quadratic(), None, config, seed=3, q=2)
        assert a.shape == (5, 2, 2)
        assert torch.equal(a, b)
        assert not fell_back

    def test_boltzmann_prefers_high_values(self):
        acq = Quadratic(center=0.9)
        boltz, _ = initialize(acq, None, OptimConfig(n_restarts=16, raw_candidates=1024, init_strategy="boltzmann"), seed=0)
        uniform, _ = initialize(acq, None, OptimConfig(n_restarts=16, raw_candidates=1024), seed=0)
        assert float(acq(boltz).mean()) > float(acq(uniform).mean())

    def test_boltzmann_constant_acquisition(self):
        """Zero spread gives uniform weights over the pool"""
        config = OptimConfig(n_restarts=8, raw_candidates=32, init_strategy="boltzmann")
        starts, fell_back = initialize(lambda X: torch.zeros(X.shape[:-2], dtype=DTYPE), make_model(), config, seed=1)
        assert starts.shape == (8, 1, 2)
        assert not fell_back
        assert len({tuple(s.reshape(-1).tolist()) for s in starts}) == 8

    def test_boltzmann_non_finite_pool(self):
        config = OptimConfig(n_restarts=4, raw_candidates=16, init_strategy="boltzmann")
        starts, fell_back = initialize(lambda X: torch.full(X.shape[:-2], -math.inf, dtype=DTYPE), make_model(), config, seed=0)
        assert fell_back
        assert starts.shape == (4, 1, 2)

    def test_pool_smaller_than_restarts(self):
        with pytest.raises(ValueError):
            OptimConfig(n_restarts=8, raw_candidates=4)


class TestOptimizeAcq:
    """Multi-start driver"""

    def test_quadratic_joint(self):
        report = optimize_acq(Quadratic(), None, 2, OptimConfig(n_restarts=3, raw_candidates=3))
        assert torch.allclose(report.best_x, torch.full((2, 2), 0.5, dtype=DTYPE), atol=1e-6)
        assert report.n_restarts == 3
        assert report.best_value == pytest.approx(max(t.value for t in report.traces), abs=1e-14)

    def test_rejects_bad_q(self):
        with pytest.raises(ConfigError):
            optimize_acq(Quadratic(), None, 0, OptimConfig())
        acq = AnalyticAcquisition(make_model(), "logei", IncumbentState(0.0))
        with pytest.raises(ConfigError):
            optimize_acq(acq, None, 2, OptimConfig())

    def test_logei_reaches_grid_maximum(self):
        """One-dimensional LogEI: the optimum is at least as good as a dense grid"""
        model = make_model(d=1, n=5, seed=4)
        acq = AnalyticAcquisition(model, "logei", IncumbentState(float(model.data.outputs.max())))
        grid = torch.linspace(0.0, 1.0, 10_000, dtype=DTYPE).reshape(-1, 1, 1)
        with torch.no_grad():
            grid_best = float(acq(grid).max())
        report = optimize_acq(acq, model, 1, OptimConfig(n_restarts=16, raw_candidates=64, init_strategy="boltzmann"))
        assert report.best_value >= grid_best - 1e-8
        assert 0.0 <= float(report.best_x.min()) and float(report.best_x.max()) <= 1.0

    def test_sequential_greedy_q1_equals_joint(self):
        model = make_model()
        acq = MCAcquisition(model, "qlogei", IncumbentState(float(model.data.outputs.max())), num_samples=32)
        joint = optimize_acq(acq, model, 1, OptimConfig(n_restarts=4, raw_candidates=8, mode="joint", seed=5))
        greedy = optimize_acq(acq, model, 1, OptimConfig(n_restarts=4, raw_candidates=8, mode="sequential_greedy", seed=5))
        assert torch.equal(joint.best_x, greedy.best_x)
        assert joint.best_value == greedy.best_value

    @pytest.mark.parametrize("mode", ["joint", "sequential_greedy"])
    def test_batch_modes_stay_in_box(self, mode):
        model = make_model()
        acq = MCAcquisition(model, "qlogei", IncumbentState(float(model.data.outputs.max())), num_samples=32)
        report = optimize_acq(acq, model, 3, OptimConfig(n_restarts=2, raw_candidates=4, mode=mode))
        assert report.best_x.shape == (3, 2)
        assert float(report.best_x.min()) >= 0.0 and float(report.best_x.max()) <= 1.0
        assert math.isfinite(report.best_value)

    def test_deterministic(self):
        model = make_model()
        acq = AnalyticAcquisition(model, "logei", IncumbentState(float(model.data.outputs.max())))
        config = OptimConfig(n_restarts=4, raw_candidates=16, init_strategy="boltzmann", seed=9)
        assert torch.equal(optimize_acq(acq, model, 1, config).best_x, optimize_acq(acq, model, 1, config).best_x)

    def test_flat_acquisition_counts_zero_gradients(self):
        """Naive EI far below the incumbent has a vanished gradient at every start"""
        model = make_model()
        acq = AnalyticAcquisition(model, "ei", IncumbentState(60.0))
        report = optimize_acq(acq, model, 1, OptimConfig(n_restarts=4, raw_candidates=4))
        assert report.zero_grad_restarts == 4
