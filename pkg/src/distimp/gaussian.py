"""Multivariate normal kernels: conditioning, log-density, sampling.

Standard normals come from ``numpy.random.Generator.standard_normal``
(the PCG64 bit generator with numpy's ziggurat transform), so a fixed seed
reproduces draws bit for bit on a given numpy version.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

LOG_2PI = np.log(2.0 * np.pi)
RCOND_MIN = 1e-12


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


def cholesky(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError("covariance is not positive definite") from None


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        scale = max(np.abs(cov).max(), np.finfo(float).tiny)
        if np.abs(cov - cov.T).max() > 1e-10 * scale:
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def chol(self) -> np.ndarray:
        return cholesky(self.cov)


def _check_rcond(block: np.ndarray):
    if block.size and 1.0 / np.linalg.cond(block) < RCOND_MIN:
        raise SingularCovarianceError("conditioning block is numerically singular")


def regression_operator(cov, observed_idx, missing_idx):
    """Return (A, S) with A = S21 S11^-1 and S = S22 - S21 S11^-1 S12."""
    cov = np.asarray(cov, dtype=float)
    s11 = cov[np.ix_(observed_idx, observed_idx)]
    s21 = cov[np.ix_(missing_idx, observed_idx)]
    s22 = cov[np.ix_(missing_idx, missing_idx)]
    _check_rcond(s11)
    l11 = cholesky(s11)
    a = cho_solve((l11, True), s21.T).T
    schur = s22 - a @ s21.T
    return a, 0.5 * (schur + schur.T)


def condition(joint: GaussianLaw, observed_idx, observed_vals) -> GaussianLaw:
    """Law of the complementary coordinates given ``x[observed_idx] = observed_vals``."""
    observed_idx = np.asarray(observed_idx, dtype=int)
    d = joint.dim
    if observed_idx.size == 0 or observed_idx.size >= d:
        raise ValueError("observed_idx must be a nonempty proper subset")
    missing_idx = np.setdiff1d(np.arange(d), observed_idx)
    a, schur = regression_operator(joint.cov, observed_idx, missing_idx)
    innovation = np.asarray(observed_vals, dtype=float) - joint.mean[observed_idx]
    law = GaussianLaw(joint.mean[missing_idx] + a @ innovation, schur)
    law.chol  # PD check
    return law


def log_density_chol(x, mean, chol) -> np.ndarray:
    """Batched log N(x; mean, L L^T); x and mean broadcast over leading axes."""
    diff = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    d = chol.shape[0]
    lead = diff.shape[:-1]
    z = solve_triangular(chol, diff.reshape(-1, d).T, lower=True).T.reshape(*lead, d)
    half_logdet = np.log(np.diag(chol)).sum()
    return -0.5 * (z**2).sum(axis=-1) - half_logdet - 0.5 * d * LOG_2PI


def log_density(law: GaussianLaw, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (law.dim,):
        raise ValueError(f"expected vector of length {law.dim}")
    return float(log_density_chol(x, law.mean, law.chol))


def sample(law: GaussianLaw, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z``; returns shape (d,) or (size, d)."""
    n = 1 if size is None else size
    z = rng.standard_normal((n, law.dim))
    out = law.mean + z @ law.chol.T
    return out[0] if size is None else out
