"""
Monte-Carlo Acquisition Unit Tests
==================================
Smoothing error bound of qLogEI, gradient behaviour where hard qEI is flat,
noisy and constrained variants, and the frozen-sample optimizer adapter.
"""

import math
import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from logacq.acq_analytic import IncumbentState, ei_value
from logacq.acq_mc import (
    CandidateBatch,
    MCAcquisition,
    Temperatures,
    qei_mc,
    qlogcei,
    qlogei,
    qlogei_value,
    qlognei,
)
from logacq.errors import ConfigError, DomainError
from logacq.settings import DTYPE
from logacq.surrogate import DataSet, GPHyperparams, GPModel, ModelList, SampleMatrix


def make_model(seed: int = 0, n: int = 8, d: int = 2, outputs: int = 1) -> ModelList:
    gen = torch.Generator().manual_seed(seed)
    X = torch.rand(n, d, generator=gen, dtype=DTYPE)
    Y = torch.stack([torch.cos(2.5 * X + m).sum(-1) for m in range(outputs)], dim=-1)
    data = DataSet.from_raw(X.numpy(), Y.numpy())
    hp = GPHyperparams(lengthscales=[0.25] * d, signal_variance=1.0, noise_variance=1e-4)
    return ModelList([GPModel(hp, data, m) for m in range(outputs)])


def assert_gradient_matches(acq, x: torch.Tensor, h: float = 1e-6, rel: float = 1e-4):
    """Autograd against central differences in every coordinate of x."""
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(acq(x), x)
    for idx in torch.cartesian_prod(*[torch.arange(k) for k in x.shape]).tolist():
        e = torch.zeros_like(x)
        e[tuple(idx)] = h
        with torch.no_grad():
            fd = float(acq(x + e) - acq(x - e)) / (2 * h)
        auto = float(g[tuple(idx)])
        assert abs(auto - fd) <= rel * max(abs(fd), abs(auto)) + 1e-6, (idx, auto, fd)


def random_samples(gen: torch.Generator, n: int, q: int) -> SampleMatrix:
    """Draws from a random correlated Gaussian over q candidates."""
    A = torch.randn(q, q, generator=gen, dtype=DTYPE)
    mean = torch.randn(q, generator=gen, dtype=DTYPE)
    base = torch.randn(n, q, generator=gen, dtype=DTYPE)
    xi = mean + base @ A.T
    return SampleMatrix(samples=xi.unsqueeze(-1), base=base)


class TestSmoothingBound:
    """|exp(qLogEI) - qEI| <= (q^tau_max - 1)·qEI + log 2·tau_0·q^tau_max"""

    @pytest.mark.parametrize("q", [1, 2, 4])
    @pytest.mark.parametrize("tau_0", [1e-2, 1e-4])
    @pytest.mark.parametrize("tau_max", [1e-1, 1e-2])
    def test_canonical_bound(self, q, tau_0, tau_max):
        gen = torch.Generator().manual_seed(q * 1000 + int(1 / tau_0) + int(1 / tau_max))
        temps = Temperatures(tau_0=tau_0, tau_max=tau_max)
        for _ in range(100):
            s = random_samples(gen, 64, q)
            hard = float(qei_mc(s, 0.0))
            smooth = math.exp(float(qlogei(s, 0.0, temps, fat=False).value))
            bound = (q ** tau_max - 1.0) * hard + math.log(2.0) * tau_0 * q ** tau_max
            assert smooth >= hard * (1.0 - 1e-12)
            assert smooth - hard <= bound * (1.0 + 1e-9) + 1e-15

    def test_fat_variant_sandwich(self):
        """qEI <= exp(fat qLogEI) <= q^tau_max·(qEI + (alpha + log 2)·tau_0)"""
        gen = torch.Generator().manual_seed(7)
        temps = Temperatures(tau_0=1e-3, tau_max=1e-2)
        for q in (1, 3):
            for _ in range(50):
                s = random_samples(gen, 64, q)
                hard = float(qei_mc(s, 0.5))
                smooth = math.exp(float(qlogei(s, 0.5, temps).value))
                assert smooth >= hard * (1.0 - 1e-12)
                assert smooth <= q ** 0.01 * (hard + (0.1 + math.log(2.0)) * 1e-3) * (1.0 + 1e-9)

    def test_permutation_invariance(self):
        gen = torch.Generator().manual_seed(1)
        s = random_samples(gen, 32, 4)
        perm = SampleMatrix(s.samples[:, [2, 0, 3, 1], :], s.base)
        temps = Temperatures()
        assert float(qlogei_value(perm, 0.0, temps)) == pytest.approx(float(qlogei_value(s, 0.0, temps)), rel=1e-12)


class TestVanishingImprovement:
    """Far below the incumbent"""

    def test_qei_flat_qlogei_informative(self):
        model = make_model()
        inc = IncumbentState(50.0)
        hard = MCAcquisition(model, "qei", inc, seed=0, num_samples=64)
        soft = MCAcquisition(model, "qlogei", inc, seed=0, num_samples=64)
        X = torch.tensor([[0.3, 0.4], [0.7, 0.1]], dtype=DTYPE, requires_grad=True)

        value = hard(X)
        assert float(value) == 0.0
        (g_hard,) = torch.autograd.grad(value, X)
        assert torch.all(g_hard == 0)

        value = soft(X)
        (g_soft,) = torch.autograd.grad(value, X)
        assert math.isfinite(float(value))
        assert torch.all(torch.isfinite(g_soft))
        assert float(g_soft.norm()) > 0


class TestVariants:
    """qLogNEI and qLogCEI"""

    def test_qlognei_uses_per_draw_incumbent(self):
        """Candidates far above every observed draw give log of the mean gap"""
        n, q = 16, 1
        observed = torch.zeros(n, 3, dtype=DTYPE)
        candidates = torch.full((n, q), 10.0, dtype=DTYPE)
        joint = torch.cat([candidates, observed], dim=-1).unsqueeze(-1)
        value = qlognei(SampleMatrix(joint, torch.zeros(n, 4, dtype=DTYPE)), q).value
        assert float(value) == pytest.approx(math.log(10.0), rel=1e-6)

    def test_qlognei_needs_observations(self):
        s = SampleMatrix(torch.zeros(4, 2, 1, dtype=DTYPE), torch.zeros(4, 2, dtype=DTYPE))
        with pytest.raises(DomainError):
            qlognei(s, 2)

    def test_qlogcei_penalizes_infeasible_draws(self):
        gen = torch.Generator().manual_seed(4)
        obj = random_samples(gen, 32, 2)
        feasible = SampleMatrix(torch.full((32, 2, 1), -5.0, dtype=DTYPE), obj.base)
        infeasible = SampleMatrix(torch.full((32, 2, 1), 5.0, dtype=DTYPE), obj.base)
        base = float(qlogei(obj, 0.0).value)
        with_feasible = float(qlogcei(obj, [feasible], 0.0).value)
        with_infeasible = float(qlogcei(obj, [infeasible], 0.0).value)
        assert with_feasible == pytest.approx(base, abs=1e-2)
        assert with_infeasible < base - 2.0
        assert math.isfinite(with_infeasible)

    def test_undefined_incumbent(self):
        s = SampleMatrix(torch.zeros(4, 1, 1, dtype=DTYPE), torch.zeros(4, 1, dtype=DTYPE))
        with pytest.raises(DomainError):
            qlogei(s, IncumbentState(None))


class TestCandidateBatch:
    """Candidate and pending validation"""

    def test_outside_cube(self):
        with pytest.raises(DomainError):
            CandidateBatch(torch.tensor([[1.2, 0.5]], dtype=DTYPE))

    def test_joint_appends_pending(self):
        batch = CandidateBatch(torch.rand(2, 3, dtype=DTYPE), torch.rand(1, 3, dtype=DTYPE))
        assert batch.q == 2
        assert batch.joint().shape == (3, 3)


class TestMCAcquisition:
    """Optimizer-facing callable"""

    def test_deterministic(self):
        acq = MCAcquisition(make_model(), "qlogei", IncumbentState(0.5), seed=3)
        X = torch.rand(2, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        assert float(acq(X)) == float(acq(X))

    def test_batched_shape(self):
        acq = MCAcquisition(make_model(), "qlogei", IncumbentState(0.5), num_samples=32)
        assert acq(torch.rand(5, 3, 2, dtype=DTYPE)).shape == (5,)

    def test_pending_shares_base_samples(self):
        acq = MCAcquisition(make_model(), "qlogei", IncumbentState(0.5), num_samples=32)
        pending = torch.tensor([[0.5, 0.5]], dtype=DTYPE)
        conditioned = acq.with_pending(pending)
        conditioned(torch.rand(1, 2, dtype=DTYPE))
        assert conditioned._cache is acq._cache
        assert (32, 2) in acq._cache

    def test_extra_column_does_not_lower_value(self):
        """Another point in the batch can only raise the per-draw max"""
        gen = torch.Generator().manual_seed(9)
        s = random_samples(gen, 64, 3)
        first_two = SampleMatrix(s.samples[:, :2, :], s.base[:, :2])
        temps = Temperatures()
        assert float(qlogei_value(s, 0.0, temps, fat=False)) >= float(qlogei_value(first_two, 0.0, temps, fat=False)) - 1e-12

    def test_qlognei_and_qlogcei_run(self):
        model = make_model(outputs=2)
        X = torch.rand(2, 2, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
        assert math.isfinite(float(MCAcquisition(model, "qlognei", seed=1, num_samples=32)(X)))
        assert math.isfinite(float(MCAcquisition(model, "qlogcei", IncumbentState(0.0), num_samples=32)(X)))
        assert math.isfinite(float(MCAcquisition(model, "qlogcei", IncumbentState(None), num_samples=32)(X)))

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            MCAcquisition(make_model(), "qucb", IncumbentState(0.0))

    def test_gradient_matches_finite_differences(self):
        """Frozen base samples make qLogEI a smooth deterministic function of X"""
        h = 1e-6
        temps = Temperatures(tau_0=0.1, tau_max=0.1)
        for seed in range(20):
            model = make_model(seed=seed)
            acq = MCAcquisition(model, "qlogei", IncumbentState(float(model.data.outputs.max())), temps, seed=seed, num_samples=64)
            x = torch.rand(2, 2, generator=torch.Generator().manual_seed(50 + seed), dtype=DTYPE)
            x = x.clamp(0.01, 0.99).requires_grad_(True)
            (g,) = torch.autograd.grad(acq(x), x)
            for i in range(2):
                for j in range(2):
                    e = torch.zeros(2, 2, dtype=DTYPE)
                    e[i, j] = h
                    with torch.no_grad():
                        fd = float(acq(x + e) - acq(x - e)) / (2 * h)
                    assert abs(float(g[i, j]) - fd) <= 1e-4 * max(abs(fd), abs(float(g[i, j]))) + 1e-6

    @pytest.mark.parametrize("seed", range(10))
    def test_qlogcei_gradient_matches_finite_differences(self, seed):
        model = make_model(seed=seed, outputs=2)
        temps = Temperatures(tau_0=0.1, tau_max=0.1, tau_cons=0.1)
        inc = IncumbentState(float(model.data.outputs[:, 0].max()))
        acq = MCAcquisition(model, "qlogcei", inc, temps, seed=seed, num_samples=64)
        x = torch.rand(2, 2, generator=torch.Generator().manual_seed(70 + seed), dtype=DTYPE)
        assert_gradient_matches(acq, x.clamp(0.01, 0.99))

    @pytest.mark.parametrize("seed", range(10))
    def test_qlognei_gradient_matches_finite_differences(self, seed):
        model = make_model(seed=seed)
        temps = Temperatures(tau_0=0.1, tau_max=0.1)
        acq = MCAcquisition(model, "qlognei", temps=temps, seed=seed, num_samples=64)
        x = torch.rand(2, 2, generator=torch.Generator().manual_seed(90 + seed), dtype=DTYPE)
        assert_gradient_matches(acq, x.clamp(0.01, 0.99))


class TestSingleCandidate:
    """q = 1 reduces to a smoothed sample average of the improvement"""

    @pytest.mark.parametrize("tau_0", [1e-2, 1e-4, 1e-6])
    def test_within_log2_tau0_of_sample_ei(self, tau_0):
        """Same draws: 0 <= exp(qLogEI) - EI_N <= log 2·tau_0"""
        gen = torch.Generator().manual_seed(11)
        temps = Temperatures(tau_0=tau_0, tau_max=1e-3)
        for _ in range(50):
            s = random_samples(gen, 256, 1)
            hard = float(qei_mc(s, 0.3))
            smooth = math.exp(float(qlogei(s, 0.3, temps, fat=False).value))
            assert abs(smooth - hard) <= math.log(2.0) * tau_0 * (1.0 + 1e-9) + 1e-12 * (1.0 + hard)

    def test_converges_to_analytic_ei(self):
        """Many draws of a single Gaussian land within MC error of closed-form EI"""
        gen = torch.Generator().manual_seed(12)
        mu, sigma, y_star = 0.2, 0.7, 0.5
        base = torch.randn(2 ** 16, 1, generator=gen, dtype=DTYPE)
        s = SampleMatrix(samples=(mu + sigma * base).unsqueeze(-1), base=base)
        temps = Temperatures(tau_0=1e-6, tau_max=1e-3)
        smooth = math.exp(float(qlogei(s, y_star, temps, fat=False).value))
        exact = float(ei_value(torch.tensor(mu, dtype=DTYPE), sigma, y_star))
        stderr = float((s.samples[..., 0, 0] - y_star).clamp_min(0.0).std()) / math.sqrt(2 ** 16)
        assert abs(smooth - exact) <= math.log(2.0) * 1e-6 + 4.0 * stderr


class TestConstraintFree:
    def test_qlogcei_without_constraints_is_qlogei(self):
        """No constraints: identical bits to qLogEI on the same draws"""
        gen = torch.Generator().manual_seed(13)
        for q in (1, 3):
            s = random_samples(gen, 32, q)
            for fat in (True, False):
                temps = Temperatures(tau_0=1e-3)
                assert torch.equal(qlogcei(s, [], 0.1, temps, fat=fat).value, qlogei(s, 0.1, temps, fat=fat).value)
