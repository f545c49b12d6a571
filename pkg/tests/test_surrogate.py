"""
Surrogate Unit Tests
====================
Data standardization, the Matérn-5/2 kernel, likelihood, fitting, posterior
moments and reparameterized sampling.
"""

import math
import os
import sys

import numpy as np
import pytest
import torch
from scipy.stats import multivariate_normal

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from logacq.errors import DomainError, FitError
from logacq.settings import DTYPE
from logacq.surrogate import (
    JITTER_LADDER,
    DataSet,
    GPHyperparams,
    GPModel,
    ModelList,
    PosteriorGaussian,
    default_hyperparams,
    draw_base_samples,
    fit,
    kernel_matern52_ard,
    load_model_record,
    log_marginal_likelihood,
    robust_cholesky,
    sample,
    save_model,
)


@pytest.fixture
def data():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(12, 2))
    y = np.sin(4.0 * X[:, 0]) + X[:, 1] ** 2
    return DataSet.from_raw(X, y)


@pytest.fixture
def hp():
    return GPHyperparams(lengthscales=[0.3, 0.5], signal_variance=1.2, noise_variance=1e-4, mean_constant=0.1)


class TestDataSet:
    """Validation and standardization"""

    def test_standardized_columns(self, data):
        """Zero mean and unit (unbiased) std"""
        assert float(data.outputs.mean()) == pytest.approx(0.0, abs=1e-12)
        assert float(data.outputs.std()) == pytest.approx(1.0, rel=1e-12)
        assert torch.allclose(data.destandardize(data.outputs[:, 0]), data.raw_outputs()[:, 0])

    def test_single_observation(self):
        """n = 1 keeps a unit std"""
        ds = DataSet.from_raw([[0.5, 0.5]], [3.0])
        assert float(ds.y_std[0]) == 1.0
        assert float(ds.outputs[0, 0]) == 0.0

    def test_constant_outputs(self):
        """Zero spread falls back to a unit std"""
        ds = DataSet.from_raw([[0.1], [0.9]], [2.0, 2.0])
        assert float(ds.y_std[0]) == 1.0

    def test_rejects_outside_cube(self):
        """Inputs outside [0, 1] are a domain error"""
        with pytest.raises(DomainError):
            DataSet.from_raw([[1.5, 0.0]], [1.0])

    def test_rejects_non_finite_outputs(self):
        with pytest.raises(DomainError):
            DataSet.from_raw([[0.5]], [float("nan")])


class TestKernel:
    """Matérn-5/2 ARD"""

    def test_diagonal_is_signal_variance(self, hp):
        assert float(kernel_matern52_ard([0.2, 0.7], [0.2, 0.7], hp)) == pytest.approx(1.2, rel=1e-12)

    def test_closed_form_at_unit_distance(self):
        """k = s²(1 + √5 + 5/3)e^(-√5) at scaled distance 1"""
        hp = GPHyperparams(lengthscales=[0.5], signal_variance=2.0)
        expected = 2.0 * (1.0 + math.sqrt(5.0) + 5.0 / 3.0) * math.exp(-math.sqrt(5.0))
        assert float(kernel_matern52_ard([0.0], [0.5], hp)) == pytest.approx(expected, rel=1e-12)

    def test_symmetric_and_decreasing(self, hp):
        X = torch.rand(6, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        K = kernel_matern52_ard(X, X, hp)
        assert torch.allclose(K, K.T)
        near = float(kernel_matern52_ard([0.0, 0.0], [0.1, 0.0], hp))
        far = float(kernel_matern52_ard([0.0, 0.0], [0.4, 0.0], hp))
        assert near > far > 0

    def test_dimension_mismatch(self, hp):
        with pytest.raises(DomainError):
            kernel_matern52_ard([0.1], [0.2], hp)


class TestCholesky:
    """Jitter escalation"""

    def test_well_conditioned_uses_first_rung(self):
        _, jitter = robust_cholesky(torch.eye(3, dtype=DTYPE))
        assert jitter == JITTER_LADDER[0]

    def test_escalates_on_rank_deficiency(self):
        """Duplicated negative-curvature direction needs more jitter"""
        K = torch.ones(4, 4, dtype=DTYPE) - 5e-8 * torch.eye(4, dtype=DTYPE)
        _, jitter = robust_cholesky(K, warn=False)
        assert jitter > JITTER_LADDER[0]

    def test_gives_up(self):
        """Indefinite beyond the ladder raises FitError"""
        with pytest.raises(FitError):
            robust_cholesky(-torch.eye(2, dtype=DTYPE))


class TestLikelihood:
    """Exact log marginal likelihood and type-II fitting"""

    def test_matches_gaussian_logpdf(self, data, hp):
        """Agrees with a dense multivariate normal (first jitter rung included)"""
        X = data.inputs
        K = kernel_matern52_ard(X, X, hp).numpy()
        cov = K + (hp.noise_variance + JITTER_LADDER[0]) * np.eye(data.n)
        y = data.outputs[:, 0].numpy()
        expected = multivariate_normal(mean=np.full(data.n, hp.mean_constant), cov=cov).logpdf(y)
        assert float(log_marginal_likelihood(hp, data)) == pytest.approx(expected, rel=1e-9)

    def test_fit_improves_on_default(self, data):
        """The fixed default start is never beaten by the returned optimum"""
        fitted = fit(data, seed=0, restarts=3)
        assert float(log_marginal_likelihood(fitted, data)) >= float(log_marginal_likelihood(default_hyperparams(2), data)) - 1e-6

    def test_fit_is_deterministic(self, data):
        assert fit(data, seed=5, restarts=2) == fit(data, seed=5, restarts=2)

    def test_noiseless_pins_noise(self, data):
        assert fit(data, seed=0, restarts=2, noiseless=True).noise_variance == pytest.approx(1e-6)

    def test_fit_needs_two_points(self):
        with pytest.raises(FitError):
            fit(DataSet.from_raw([[0.5]], [1.0]))

    def test_duplicate_inputs_raise_noise(self):
        """Two outputs at one input are explained by noise, not a singular fit"""
        ds = DataSet.from_raw([[0.5, 0.5], [0.5, 0.5]], [0.0, 1.0])
        fitted = fit(ds, seed=0, restarts=3)
        assert fitted.noise_variance > 0.1

    def test_recovers_lengthscales(self):
        """Noiseless draws from a known prior: within a factor of 2 in at least 16 of 20 trials"""
        truth = GPHyperparams(lengthscales=[0.2, 0.4], signal_variance=1.0, noise_variance=1e-6)
        hits = 0
        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            X = torch.rand(60, 2, generator=gen, dtype=DTYPE)
            K = kernel_matern52_ard(X, X, truth) + 1e-8 * torch.eye(60, dtype=DTYPE)
            y = torch.linalg.cholesky(K) @ torch.randn(60, generator=gen, dtype=DTYPE)
            fitted = fit(DataSet.from_raw(X.numpy(), y.numpy()), seed=seed, restarts=3, noiseless=True)
            ratios = np.asarray(fitted.lengthscales) / np.asarray(truth.lengthscales)
            hits += bool(np.all((ratios >= 0.5) & (ratios <= 2.0)))
        assert hits >= 16


class TestPosterior:
    """Posterior moments and gradients"""

    def test_interpolates_training_data(self, data, hp):
        model = GPModel(hp, data)
        post = model.posterior(data.inputs[:3])
        assert torch.allclose(post.mean, data.outputs[:3, 0], atol=5e-2)
        assert torch.all(post.variance >= -1e-10)
        assert torch.all(post.variance < 1e-2)

    def test_prior_without_data(self, hp):
        """n = 0 gives the prior"""
        empty = DataSet.from_raw(np.zeros((0, 2)), np.zeros((0, 1)))
        post = GPModel(hp, empty).posterior([[0.3, 0.3]])
        assert float(post.mu) == pytest.approx(0.1)
        assert float(post.sigma) == pytest.approx(math.sqrt(1.2))

    def test_gradient_matches_finite_differences(self, data, hp):
        model = GPModel(hp, data)
        x = torch.tensor([0.37, 0.61], dtype=DTYPE)
        dmu, dsigma = model.posterior_grad(x)
        h = 1e-6
        for j in range(2):
            e = torch.zeros(2, dtype=DTYPE)
            e[j] = h
            hi, lo = model.posterior(x + e), model.posterior(x - e)
            assert float(dmu[j]) == pytest.approx(float(hi.mu - lo.mu) / (2 * h), rel=1e-5, abs=1e-7)
            assert float(dsigma[j]) == pytest.approx(float(hi.sigma - lo.sigma) / (2 * h), rel=1e-5, abs=1e-7)

    def test_sigma_floor_flag(self):
        post = PosteriorGaussian.from_moments(0.0, 0.0)
        assert bool(post.sigma_floored)
        assert float(post.sigma) == pytest.approx(1e-12)

    def test_joint_posterior_layout(self, data, hp):
        """Two outputs stack output-major with a block-diagonal covariance"""
        models = ModelList([GPModel(hp, data), GPModel(hp, data)])
        post = models.posterior(torch.rand(3, 2, dtype=DTYPE))
        assert post.mean.shape == (6,)
        assert post.covariance.shape == (6, 6)
        assert torch.all(post.covariance[:3, 3:] == 0)


class TestSampling:
    """Reparameterized draws"""

    def test_base_samples_are_frozen(self):
        assert torch.equal(draw_base_samples(8, 3, 11), draw_base_samples(8, 3, 11))
        assert not torch.equal(draw_base_samples(8, 3, 11), draw_base_samples(8, 3, 12))

    def test_sample_moments(self, data, hp):
        """Sample mean approaches the posterior mean"""
        model = GPModel(hp, data)
        post = model.posterior(torch.tensor([[0.2, 0.2], [0.8, 0.4]], dtype=DTYPE))
        draws = sample(post, draw_base_samples(20000, 2, 0))
        assert draws.samples.shape == (20000, 2, 1)
        sd = post.variance.sqrt()
        assert torch.all((draws.samples[..., 0].mean(0) - post.mean).abs() < 5 * sd / math.sqrt(20000) + 1e-6)

    def test_width_mismatch(self, data, hp):
        post = GPModel(hp, data).posterior(torch.rand(2, 2, dtype=DTYPE))
        with pytest.raises(DomainError):
            sample(post, draw_base_samples(4, 3, 0))

    def test_gradient_wrt_inputs_matches_finite_differences(self, data, hp):
        """A frozen draw is a smooth function of the candidate coordinates"""
        model = GPModel(hp, data)
        base = draw_base_samples(4, 2, 5)
        weights = torch.tensor([1.0, -0.5], dtype=DTYPE)

        def draw(X):
            return (sample(model.posterior(X), base).samples[1, :, 0] * weights).sum()

        X = torch.tensor([[0.23, 0.71], [0.64, 0.35]], dtype=DTYPE, requires_grad=True)
        (g,) = torch.autograd.grad(draw(X), X)
        h = 1e-6
        for i in range(2):
            for j in range(2):
                e = torch.zeros(2, 2, dtype=DTYPE)
                e[i, j] = h
                with torch.no_grad():
                    fd = float(draw(X + e) - draw(X - e)) / (2 * h)
                assert abs(float(g[i, j]) - fd) <= 1e-4 * max(abs(fd), abs(float(g[i, j]))) + 1e-7


class TestModelRecord:
    """JSON model records"""

    def test_round_trip(self, data, hp, tmp_path):
        models = ModelList([GPModel(hp, data)])
        path = str(tmp_path / "model.json")
        save_model(models, path, extra={"problem": "toy"})
        record = load_model_record(path)
        assert record["problem"] == "toy"
        restored = ModelList.from_record(record)
        X = torch.rand(4, 2, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
        assert torch.allclose(restored.posterior(X).mean, models.posterior(X).mean, atol=1e-10)

    def test_missing_record(self, tmp_path):
        with pytest.raises(OSError):
            load_model_record(str(tmp_path / "absent.json"))
