"""Group-specific MMRM with unstructured covariance, fitted by monotone factorization.

Under monotone dropout the observed-data likelihood factors into one
regression per visit: y_k on (1, x, y_1..y_{k-1}) among subjects still
observed at k. Each factor has its own parameters, so the per-visit
(weighted) least-squares fits with ML residual variance give the exact
observed-data MLE. The sequential parameters are then mapped to the
(Beta, Sigma) form used for imputation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .data import CONTROL, TREATMENT, TrialDataset
from .gaussian import LOG_2PI, cholesky

GROUPS = (CONTROL, TREATMENT)


class MmrmFitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MmrmFit:
    """Fitted parameters, indexed by ``group - 1`` on the leading axis.

    beta:      (2, T, p+1) rows are per-visit coefficients, intercept first
    sigma:     (2, T, T)
    alpha:     per group, list of T coefficient vectors on (1, x, y_1..y_{k-1})
    resid_var: (2, T) sequential residual variances
    """

    beta: np.ndarray
    sigma: np.ndarray
    alpha: tuple
    resid_var: np.ndarray
    loglik: float = float("nan")

    @property
    def n_visits(self) -> int:
        return self.beta.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.beta.shape[2] - 1

    def Beta(self, g: int) -> np.ndarray:
        return self.beta[g - 1]

    def Sigma(self, g: int) -> np.ndarray:
        return self.sigma[g - 1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.beta).tobytes())
        h.update(np.ascontiguousarray(self.sigma).tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "beta": {str(g): self.Beta(g).tolist() for g in GROUPS},
            "sigma": {str(g): self.Sigma(g).tolist() for g in GROUPS},
            "seq": {
                str(g): [
                    {"alpha": a.tolist(), "resid_var": float(v)}
                    for a, v in zip(self.alpha[g - 1], self.resid_var[g - 1])
                ]
                for g in GROUPS
            },
            "loglik": self.loglik,
            "fingerprint": self.fingerprint(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MmrmFit":
        alpha = tuple(tuple(np.array(s["alpha"]) for s in d["seq"][str(g)]) for g in GROUPS)
        resid = np.array([[s["resid_var"] for s in d["seq"][str(g)]] for g in GROUPS])
        return cls(
            beta=np.array([d["beta"][str(g)] for g in GROUPS]),
            sigma=np.array([d["sigma"][str(g)] for g in GROUPS]),
            alpha=alpha,
            resid_var=resid,
            loglik=d.get("loglik", float("nan")),
        )

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def sequential_to_mvn(alpha, resid_var, q: int):
    """Map per-visit regressions to the implied (Beta, Sigma) of y given x."""
    T = len(alpha)
    beta = np.zeros((T, q))
    sigma = np.zeros((T, T))
    for k in range(T):
        a = np.asarray(alpha[k])
        a_y = a[q:]
        beta[k] = a[:q] + a_y @ beta[:k]
        cross = a_y @ sigma[:k, :k]
        sigma[k, :k] = cross
        sigma[:k, k] = cross
        sigma[k, k] = cross @ a_y + resid_var[k]
    return beta, sigma


def mvn_to_sequential(beta, sigma):
    """Inverse of :func:`sequential_to_mvn`."""
    T, q = beta.shape
    alpha, resid = [], np.zeros(T)
    for k in range(T):
        if k == 0:
            a_y = np.zeros(0)
            resid[k] = sigma[0, 0]
        else:
            a_y = np.linalg.solve(sigma[:k, :k], sigma[:k, k])
            resid[k] = sigma[k, k] - sigma[k, :k] @ a_y
        alpha.append(np.concatenate([beta[k] - a_y @ beta[:k], a_y]))
    return alpha, resid


def _fit_group(design, y, r, w):
    n, q = design.shape
    T = y.shape[1]
    alpha, resid = [], np.zeros(T)
    for k in range(T):
        rows = r[:, k] & (w > 0)
        D = np.column_stack([design[rows], y[rows, :k]])
        if rows.sum() < D.shape[1] + 1:
            raise MmrmFitError(
                f"visit {k + 1}: {int(rows.sum())} observed subjects with positive weight "
                f"cannot identify {D.shape[1]} coefficients"
            )
        sw = np.sqrt(w[rows])
        coef, _, rank, _ = np.linalg.lstsq(D * sw[:, None], y[rows, k] * sw, rcond=None)
        if rank < D.shape[1]:
            raise MmrmFitError(f"visit {k + 1}: rank-deficient sequential regression")
        e = y[rows, k] - D @ coef
        var = float(w[rows] @ e**2 / w[rows].sum())
        if not var > 0:
            raise MmrmFitError(f"visit {k + 1}: non-positive residual variance")
        alpha.append(coef)
        resid[k] = var
    return alpha, resid


def fit(dataset: TrialDataset, weights=None, with_loglik: bool = True) -> MmrmFit:
    """Observed-data MLE of the group-specific MMRM, optionally subject-weighted.

    ``with_loglik=False`` skips evaluating the maximized log-likelihood (bootstrap refits).
    """
    n = dataset.n_subjects
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError("weights must have one entry per subject")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    design = dataset.design
    q = design.shape[1]
    betas, sigmas, alphas, resids = [], [], [], []
    for g in GROUPS:
        m = dataset.group == g
        try:
            alpha, resid = _fit_group(design[m], dataset.y[m], dataset.r[m], w[m])
        except MmrmFitError as exc:
            raise MmrmFitError(f"group {g}: {exc}") from None
        beta, sigma = sequential_to_mvn(alpha, resid, q)
        betas.append(beta)
        sigmas.append(sigma)
        alphas.append(tuple(alpha))
        resids.append(resid)
    out = MmrmFit(np.array(betas), np.array(sigmas), tuple(alphas), np.array(resids))
    if with_loglik:
        object.__setattr__(out, "loglik", observed_loglik(out, dataset, w))
    return out


def from_mvn(beta, sigma) -> MmrmFit:
    """Build a fit object from known (Beta, Sigma) pairs, e.g. true parameters."""
    beta = np.asarray(beta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    seqs = [mvn_to_sequential(beta[j], sigma[j]) for j in range(2)]
    return MmrmFit(beta, sigma, tuple(tuple(s[0]) for s in seqs), np.array([s[1] for s in seqs]))


def observed_loglik(fit: MmrmFit, dataset: TrialDataset, weights=None) -> float:
    """sum_i w_i log f(y_obs,i | x_i, g_i) using the leading k_i x k_i marginal."""
    if fit.n_visits != dataset.n_visits or fit.n_covariates != dataset.n_covariates:
        raise ValueError("fit dimensions do not match dataset")
    n = dataset.n_subjects
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    design = dataset.design
    k_all = dataset.last_observed
    total = 0.0
    for g in GROUPS:
        for k in range(1, dataset.n_visits + 1):
            rows = (dataset.group == g) & (k_all == k) & (w != 0)
            if not rows.any():
                continue
            mu = design[rows] @ fit.Beta(g)[:k].T
            L = cholesky(fit.Sigma(g)[:k, :k])
            z = np.linalg.solve(L, (dataset.y[rows, :k] - mu).T)
            ll = -0.5 * (z**2).sum(axis=0) - np.log(np.diag(L)).sum() - 0.5 * k * LOG_2PI
            total += float(w[rows] @ ll)
    return total
