"""
Surrogate
=========
Matérn-5/2 ARD Gaussian-process regression on the unit cube.

Outputs are standardized per column before fitting, and every posterior is
expressed on that standardized scale. A `ModelList` holds one independent GP
per objective or constraint and produces joint block-diagonal posteriors, whose
flattened output index is `m * q + j` (output-major).
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import orjson
import torch
from pydantic import BaseModel, Field, field_validator

from .errors import DomainError, FitError
from .settings import DTYPE, FIT_RESTARTS

logger = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
LENGTHSCALE_BOUNDS = (0.01, 100.0)
SIGNAL_BOUNDS = (1e-6, 1e3)
NOISE_BOUNDS = (1e-6, 10.0)
MEAN_BOUNDS = (-10.0, 10.0)
NOISE_FLOOR = NOISE_BOUNDS[0]
JITTER_LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
# σ ≥ 1e-12
VARIANCE_FLOOR = 1e-24
INPUT_TOL = 1e-12


# ==================== Data ====================

@dataclass(frozen=True)
class DataSet:
    """
    Training data on the unit cube with standardized outputs.

    Attributes:
        inputs: (n, d) tensor, every coordinate in [0, 1]
        outputs: (n, M) tensor of standardized outputs
        y_mean: (M,) column means of the raw outputs
        y_std: (M,) column standard deviations of the raw outputs (1 when degenerate)
    """

    inputs: torch.Tensor
    outputs: torch.Tensor
    y_mean: torch.Tensor
    y_std: torch.Tensor

    @classmethod
    def from_raw(cls, inputs, outputs) -> "DataSet":
        """Validate raw observations and standardize each output column."""
        X = torch.as_tensor(np.asarray(inputs, dtype=np.float64), dtype=DTYPE)
        Y = torch.as_tensor(np.asarray(outputs, dtype=np.float64), dtype=DTYPE)
        if X.dim() != 2:
            raise DomainError(f"inputs must be an (n, d) matrix, got shape {tuple(X.shape)}")
        if Y.dim() == 1:
            Y = Y.unsqueeze(-1)
        if Y.shape[0] != X.shape[0]:
            raise DomainError("inputs and outputs disagree on the number of rows")
        if X.numel() and (X.min() < -INPUT_TOL or X.max() > 1.0 + INPUT_TOL):
            raise DomainError("inputs must lie in the unit cube")
        if not torch.all(torch.isfinite(Y)):
            raise DomainError("outputs must be finite")
        X = X.clamp(0.0, 1.0)

        n = Y.shape[0]
        if n == 0:
            y_mean = torch.zeros(Y.shape[1], dtype=DTYPE)
            y_std = torch.ones(Y.shape[1], dtype=DTYPE)
        else:
            y_mean = Y.mean(dim=0)
            y_std = Y.std(dim=0) if n > 1 else torch.ones(Y.shape[1], dtype=DTYPE)
            y_std = torch.where(y_std > 0, y_std, torch.ones_like(y_std))
        return cls(inputs=X, outputs=(Y - y_mean) / y_std, y_mean=y_mean, y_std=y_std)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_outputs(self) -> int:
        return self.outputs.shape[1]

    def raw_outputs(self) -> torch.Tensor:
        return self.outputs * self.y_std + self.y_mean

    def standardize(self, values, output: int = 0) -> torch.Tensor:
        return (torch.as_tensor(values, dtype=DTYPE) - self.y_mean[output]) / self.y_std[output]

    def destandardize(self, values, output: int = 0) -> torch.Tensor:
        return torch.as_tensor(values, dtype=DTYPE) * self.y_std[output] + self.y_mean[output]


class GPHyperparams(BaseModel):
    """Hyperparameters of one Matérn-5/2 ARD GP, on the standardized output scale."""

    lengthscales: list[float]
    signal_variance: float = Field(default=1.0, gt=0)
    noise_variance: float = Field(default=NOISE_FLOOR, ge=0)
    mean_constant: float = 0.0

    @field_validator("lengthscales")
    @classmethod
    def check_lengthscales(cls, v: list[float]) -> list[float]:
        lo, hi = LENGTHSCALE_BOUNDS
        if not v:
            raise ValueError("at least one lengthscale is required")
        for ls in v:
            # tolerate round-off from the log-space optimizer at the box edges
            if not (lo * (1 - 1e-9) <= ls <= hi * (1 + 1e-9)):
                raise ValueError(f"lengthscale {ls} outside [{lo}, {hi}]")
        return v


# ==================== Kernel & Likelihood ====================

def _matern52(x1: torch.Tensor, x2: torch.Tensor, lengthscales: torch.Tensor, signal_variance: torch.Tensor) -> torch.Tensor:
    diff = (x1.unsqueeze(-2) - x2.unsqueeze(-3)) / lengthscales
    r2 = (diff * diff).sum(-1)
    # sqrt is not differentiable at 0; the kernel derivative vanishes there anyway
    r = torch.sqrt(torch.clamp(r2, min=1e-30))
    sr = SQRT5 * r
    return signal_variance * (1.0 + sr + (5.0 / 3.0) * r2) * torch.exp(-sr)


def kernel_matern52_ard(x1, x2, hp: GPHyperparams) -> torch.Tensor:
    """
    Matérn-5/2 kernel with one lengthscale per input dimension.

    Args:
        x1: a point (d,) or a batch (..., n, d)
        x2: a point (d,) or a batch (..., m, d)
        hp: hyperparameters supplying lengthscales and signal variance

    Returns:
        k(x1, x2) as a scalar for two points, else an (..., n, m) matrix
    """
    x1 = torch.as_tensor(x1, dtype=DTYPE)
    x2 = torch.as_tensor(x2, dtype=DTYPE)
    ls = torch.as_tensor(hp.lengthscales, dtype=DTYPE)
    if x1.shape[-1] != ls.shape[0] or x2.shape[-1] != ls.shape[0]:
        raise DomainError("point dimension does not match the number of lengthscales")
    points = x1.dim() == 1 and x2.dim() == 1
    if x1.dim() == 1:
        x1 = x1.unsqueeze(0)
    if x2.dim() == 1:
        x2 = x2.unsqueeze(0)
    k = _matern52(x1, x2, ls, torch.as_tensor(hp.signal_variance, dtype=DTYPE))
    return k[0, 0] if points else k


def robust_cholesky(K: torch.Tensor, warn: bool = True) -> tuple[torch.Tensor, float]:
    """
    Cholesky factor of K + jitter·I, escalating jitter 1e-8 → 1e-4 by factors of 10.

    Raises:
        FitError: if the matrix is not positive definite at the largest jitter
    """
    eye = torch.eye(K.shape[-1], dtype=K.dtype)
    for jitter in JITTER_LADDER:
        L, info = torch.linalg.cholesky_ex(K + jitter * eye)
        if not torch.any(info) and torch.all(torch.isfinite(L)):
            if warn and jitter > JITTER_LADDER[0]:
                logger.warning("Cholesky needed jitter %.0e", jitter)
            return L, jitter
    raise FitError(f"covariance not positive definite after jitter {JITTER_LADDER[-1]:.0e}")


def _lml(X: torch.Tensor, y: torch.Tensor, ls, sv, noise, mean) -> torch.Tensor:
    n = X.shape[0]
    K = _matern52(X, X, ls, sv) + noise * torch.eye(n, dtype=DTYPE)
    L, _ = robust_cholesky(K, warn=False)
    resid = (y - mean).unsqueeze(-1)
    alpha = torch.cholesky_solve(resid, L)
    return (
        -0.5 * (resid * alpha).sum()
        - torch.log(torch.diagonal(L)).sum()
        - 0.5 * n * math.log(2.0 * math.pi)
    )


def log_marginal_likelihood(hp: GPHyperparams, data: DataSet, output: int = 0) -> torch.Tensor:
    """Exact log marginal likelihood of the standardized column `output`."""
    return _lml(
        data.inputs,
        data.outputs[:, output],
        torch.as_tensor(hp.lengthscales, dtype=DTYPE),
        torch.as_tensor(hp.signal_variance, dtype=DTYPE),
        torch.as_tensor(hp.noise_variance, dtype=DTYPE),
        torch.as_tensor(hp.mean_constant, dtype=DTYPE),
    )


# ==================== Fitting ====================

def _fit_bounds(d: int, noiseless: bool) -> np.ndarray:
    log_noise = (math.log(NOISE_FLOOR), math.log(NOISE_FLOOR)) if noiseless else tuple(map(math.log, NOISE_BOUNDS))
    return np.array(
        [tuple(map(math.log, LENGTHSCALE_BOUNDS))] * d
        + [tuple(map(math.log, SIGNAL_BOUNDS)), log_noise, MEAN_BOUNDS],
        dtype=np.float64,
    )


def _unpack(theta: torch.Tensor, d: int):
    return torch.exp(theta[:d]), torch.exp(theta[d]), torch.exp(theta[d + 1]), theta[d + 2]


def _default_lengthscale(d: int) -> float:
    return min(max(0.2 * math.sqrt(d), 0.05), 5.0)


def default_hyperparams(d: int) -> GPHyperparams:
    """Prior used when there is too little data to fit, and the first fit restart."""
    return GPHyperparams(lengthscales=[_default_lengthscale(d)] * d, signal_variance=1.0, noise_variance=1e-3, mean_constant=0.0)


def _start_points(d: int, bounds: np.ndarray, restarts: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    default = np.concatenate([
        np.full(d, math.log(_default_lengthscale(d))),
        [0.0, max(math.log(1e-3), bounds[d + 1, 0]), 0.0],
    ])
    starts = [np.clip(default, bounds[:, 0], bounds[:, 1])]
    for _ in range(restarts - 1):
        x0 = rng.uniform(bounds[:, 0], bounds[:, 1])
        x0[d + 2] = rng.uniform(-1.0, 1.0)
        starts.append(x0)
    return starts


def fit(data: DataSet, seed: int = 0, output: int = 0, restarts: int = FIT_RESTARTS, noiseless: bool = False) -> GPHyperparams:
    """
    Type-II maximum likelihood for one output column.

    Each restart maximizes the log marginal likelihood over log-lengthscales,
    log-signal, log-noise and the constant mean with bound-constrained L-BFGS-B.

    Args:
        data: training data (n >= 2)
        seed: seed of the restart draws
        output: which standardized column to model
        restarts: number of starts (first one is a fixed default)
        noiseless: pin the noise variance to its floor (exact interpolation)

    Returns:
        The best hyperparameters found; ties go to the lowest restart index.

    Raises:
        FitError: if no restart produces a finite likelihood
    """
    from .acq_opt import lbfgsb_local

    if data.n < 2:
        raise FitError(f"fitting needs at least 2 observations, got {data.n}")
    d = data.d
    X = data.inputs
    y = data.outputs[:, output]
    bounds = _fit_bounds(d, noiseless)

    def objective(theta_np: np.ndarray) -> tuple[float, np.ndarray]:
        theta = torch.tensor(theta_np, dtype=DTYPE, requires_grad=True)
        try:
            value = _lml(X, y, *_unpack(theta, d))
        except FitError:
            return float("-inf"), np.zeros_like(theta_np)
        (grad,) = torch.autograd.grad(value, theta)
        return float(value), grad.numpy()

    best_theta, best_value = None, float("-inf")
    for i, x0 in enumerate(_start_points(d, bounds, max(restarts, 1), seed)):
        try:
            result = lbfgsb_local(objective, x0, bounds=bounds)
        except Exception as e:
            logger.debug("fit restart %d failed: %s", i, e)
            continue
        if math.isfinite(result.value) and result.value > best_value:
            best_theta, best_value = result.x, result.value
    if best_theta is None:
        raise FitError("no hyperparameter restart produced a finite likelihood")

    ls = np.clip(np.exp(best_theta[:d]), *LENGTHSCALE_BOUNDS)
    hp = GPHyperparams(
        lengthscales=[float(v) for v in ls],
        signal_variance=float(np.exp(best_theta[d])),
        noise_variance=float(max(np.exp(best_theta[d + 1]), NOISE_FLOOR)),
        mean_constant=float(best_theta[d + 2]),
    )
    logger.debug("fit output %d: lml=%.4f hp=%s", output, best_value, hp.model_dump())
    return hp


# ==================== Posterior ====================

@dataclass(frozen=True)
class PosteriorGaussian:
    """
    Joint Gaussian over q·M outputs at a candidate batch.

    `mean` is (..., q·M) and `covariance` is (..., q·M, q·M), flattened
    output-major. For q = M = 1 `mu` and `sigma` expose the scalar belief.
    """

    mean: torch.Tensor
    covariance: torch.Tensor
    q: int
    num_outputs: int = 1
    X: Optional[torch.Tensor] = None

    @classmethod
    def from_moments(cls, mu, sigma) -> "PosteriorGaussian":
        """Scalar posterior(s) N(mu, sigma²), one per element of mu."""
        mu = torch.as_tensor(mu, dtype=DTYPE)
        sigma = torch.as_tensor(sigma, dtype=DTYPE)
        mu, sigma = torch.broadcast_tensors(mu, sigma)
        return cls(mu.unsqueeze(-1), (sigma * sigma).unsqueeze(-1).unsqueeze(-1), 1, 1)

    @property
    def variance(self) -> torch.Tensor:
        return torch.diagonal(self.covariance, dim1=-2, dim2=-1)

    @property
    def mu(self) -> torch.Tensor:
        return self.mean[..., 0]

    @property
    def sigma(self) -> torch.Tensor:
        return torch.sqrt(torch.clamp(self.variance[..., 0], min=VARIANCE_FLOOR))

    @property
    def sigma_floored(self) -> torch.Tensor:
        return self.variance[..., 0] < VARIANCE_FLOOR

    def output(self, m: int) -> "PosteriorGaussian":
        """Marginal posterior of output m over the same q points."""
        sl = slice(m * self.q, (m + 1) * self.q)
        return PosteriorGaussian(self.mean[..., sl], self.covariance[..., sl, sl], self.q, 1, self.X)


@dataclass(frozen=True)
class SampleMatrix:
    """Reparameterized posterior draws: samples (..., N, q, M) = mean + L·base."""

    samples: torch.Tensor
    base: torch.Tensor
    X: Optional[torch.Tensor] = None

    @property
    def num_samples(self) -> int:
        return self.samples.shape[-3]


class GPModel:
    """
    Fitted single-output GP. Immutable once built; the Cholesky factor of the
    training covariance and the solve against the centered outputs are cached.
    """

    def __init__(self, hp: GPHyperparams, data: DataSet, output: int = 0):
        if len(hp.lengthscales) != data.d:
            raise DomainError(f"{len(hp.lengthscales)} lengthscales for {data.d}-dimensional inputs")
        self.hp = hp
        self.data = data
        self.output = output
        self._ls = torch.as_tensor(hp.lengthscales, dtype=DTYPE)
        self._sv = torch.as_tensor(hp.signal_variance, dtype=DTYPE)
        self._mean = torch.as_tensor(hp.mean_constant, dtype=DTYPE)
        self._X = data.inputs
        self._L: Optional[torch.Tensor] = None
        self._alpha: Optional[torch.Tensor] = None
        if data.n > 0:
            K = _matern52(self._X, self._X, self._ls, self._sv)
            K = K + hp.noise_variance * torch.eye(data.n, dtype=DTYPE)
            self._L, self.jitter = robust_cholesky(K)
            resid = (data.outputs[:, output] - self._mean).unsqueeze(-1)
            self._alpha = torch.cholesky_solve(resid, self._L)
        else:
            self.jitter = 0.0

    @property
    def d(self) -> int:
        return self.data.d

    def posterior(self, X) -> PosteriorGaussian:
        """Latent-function posterior at X of shape (..., q, d)."""
        X = torch.as_tensor(X, dtype=DTYPE)
        if X.dim() == 1:
            X = X.unsqueeze(0)
        Kss = _matern52(X, X, self._ls, self._sv)
        if self._L is None:
            mean = self._mean.expand(X.shape[:-1])
            return PosteriorGaussian(mean, Kss, X.shape[-2], 1, X)
        Ksx = _matern52(X, self._X, self._ls, self._sv)
        mean = self._mean + (Ksx @ self._alpha).squeeze(-1)
        v = torch.linalg.solve_triangular(self._L, Ksx.transpose(-1, -2), upper=False)
        cov = Kss - v.transpose(-1, -2) @ v
        return PosteriorGaussian(mean, cov, X.shape[-2], 1, X)

    def posterior_grad(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        """(dμ/dx, dσ/dx) at a single point x of shape (d,)."""
        x = torch.as_tensor(x, dtype=DTYPE).detach().clone().requires_grad_(True)
        post = self.posterior(x.unsqueeze(0))
        dmu = torch.autograd.grad(post.mu, x, retain_graph=True)[0]
        dsigma = torch.autograd.grad(post.sigma, x)[0]
        return dmu, dsigma

    def to_record(self) -> dict:
        return {"output": self.output, "hyperparams": self.hp.model_dump()}


def posterior(hp: GPHyperparams, data: DataSet, X, output: int = 0) -> PosteriorGaussian:
    return GPModel(hp, data, output).posterior(X)


def posterior_grad(hp: GPHyperparams, data: DataSet, x, output: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    return GPModel(hp, data, output).posterior_grad(x)


def _block_diag(blocks: Sequence[torch.Tensor]) -> torch.Tensor:
    batch = blocks[0].shape[:-2]
    sizes = [b.shape[-1] for b in blocks]
    total = sum(sizes)
    out = blocks[0].new_zeros(*batch, total, total)
    start = 0
    for b, s in zip(blocks, sizes):
        out[..., start:start + s, start:start + s] = b
        start += s
    return out


class ModelList:
    """Independent GPs sharing one input set, one per output column."""

    def __init__(self, models: Sequence[GPModel]):
        if not models:
            raise DomainError("a model list needs at least one model")
        self.models = list(models)
        self.data = self.models[0].data

    @classmethod
    def fit(cls, data: DataSet, seed: int = 0, noiseless: bool = False, restarts: int = FIT_RESTARTS) -> "ModelList":
        models = []
        for m in range(data.num_outputs):
            hp = fit(data, seed=seed + m, output=m, restarts=restarts, noiseless=noiseless)
            models.append(GPModel(hp, data, m))
        return cls(models)

    @property
    def num_outputs(self) -> int:
        return len(self.models)

    @property
    def d(self) -> int:
        return self.data.d

    def posterior(self, X, outputs: Optional[Sequence[int]] = None) -> PosteriorGaussian:
        """Joint posterior at X (..., q, d) over the selected outputs (all by default)."""
        picked = [self.models[m] for m in (outputs if outputs is not None else range(self.num_outputs))]
        posts = [m.posterior(X) for m in picked]
        if len(posts) == 1:
            return posts[0]
        mean = torch.cat([p.mean for p in posts], dim=-1)
        cov = _block_diag([p.covariance for p in posts])
        return PosteriorGaussian(mean, cov, posts[0].q, len(posts), posts[0].X)

    def to_record(self) -> dict:
        return {
            "inputs": self.data.inputs.tolist(),
            "outputs": self.data.raw_outputs().tolist(),
            "y_mean": self.data.y_mean.tolist(),
            "y_std": self.data.y_std.tolist(),
            "models": [m.to_record() for m in self.models],
        }

    @classmethod
    def from_record(cls, record: dict) -> "ModelList":
        data = DataSet.from_raw(record["inputs"], record["outputs"])
        models = [
            GPModel(GPHyperparams(**r["hyperparams"]), data, r.get("output", i))
            for i, r in enumerate(record["models"])
        ]
        return cls(models)


def save_model(models: ModelList, path: str, extra: Optional[dict] = None) -> None:
    record = models.to_record()
    if extra:
        record.update(extra)
    try:
        with open(path, "wb") as f:
            f.write(orjson.dumps(record, option=orjson.OPT_INDENT_2))
    except OSError as e:
        raise OSError(f"cannot write model record {path}: {e}") from e


def load_model_record(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            return orjson.loads(f.read())
    except OSError as e:
        raise OSError(f"cannot read model record {path}: {e}") from e


# ==================== Sampling ====================

def draw_base_samples(num_samples: int, dim: int, seed: int) -> torch.Tensor:
    """Frozen N×dim standard-normal base draws from a private generator."""
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(num_samples, dim, generator=gen, dtype=DTYPE)


def sample(post: PosteriorGaussian, base: torch.Tensor) -> SampleMatrix:
    """
    ξ = μ + L·base per draw, reshaped to (..., N, q, M).

    Gradients reach the candidates through μ and through the Cholesky factor L.
    """
    qm = post.mean.shape[-1]
    if base.shape[-1] != qm:
        raise DomainError(f"base samples have width {base.shape[-1]}, posterior has {qm} outputs")
    L, _ = robust_cholesky(post.covariance, warn=False)
    flat = post.mean.unsqueeze(-2) + base @ L.transpose(-1, -2)
    shaped = flat.reshape(*flat.shape[:-1], post.num_outputs, post.q).transpose(-1, -2)
    return SampleMatrix(samples=shaped, base=base, X=post.X)
