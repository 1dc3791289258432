"""Conditional imputation laws for MAR, jump-to-reference, return-to-baseline and washout.

For a subject in arm j whose last observed visit is k:

* MAR      y_mis | y_obs under the subject's own arm law.
* J2R      mean  X~'beta_1,mis + S21 S11^-1 (y_obs - X~'beta_j,obs), cov S22 - S21 S11^-1 S12,
           with every S block taken from the control covariance. For controls this is MAR.
* RTB      only the final visit is imputed, from the arm's baseline marginal
           N(X~'beta_j1, Sigma_j[1, 1]); post-baseline outcomes are ignored.
* Washout  controls as MAR, treated as RTB.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import CONTROL, TREATMENT, TrialDataset
from .gaussian import GaussianLaw, cholesky, regression_operator
from .mmrm import MmrmFit


class SensitivityModel(str, enum.Enum):
    MAR = "mar"
    J2R = "j2r"
    RTB = "rtb"
    WASHOUT = "washout"

    @classmethod
    def parse(cls, value) -> "SensitivityModel":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown sensitivity model {value!r}; choose from mar, j2r, rtb, washout") from None


class ImputationLawError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConditionalLaw:
    subject: object
    visits: tuple  # 1-based visit numbers covered by the law
    law: GaussianLaw


@dataclass(frozen=True, eq=False)
class LawBlock:
    """Laws for all subjects sharing (arm, last observed visit); one covariance per block."""

    group: int
    k: int
    subjects: np.ndarray
    visits: np.ndarray  # 0-based
    mean: np.ndarray  # (n_b, d)
    cov: np.ndarray  # (d, d)

    @property
    def chol(self) -> np.ndarray:
        return cholesky(self.cov)

    @property
    def dim(self) -> int:
        return self.visits.size


def _uses_rtb(model: SensitivityModel, group: int) -> bool:
    return model is SensitivityModel.RTB or (model is SensitivityModel.WASHOUT and group == TREATMENT)


def _block_params(fit: MmrmFit, model: SensitivityModel, group: int, k: int, T: int):
    """Return (visits, mean_fn, cov) for pattern (group, k); mean_fn(design, y_obs)."""
    if _uses_rtb(model, group):
        b1 = fit.Beta(group)[0]
        var = fit.Sigma(group)[:1, :1].copy()
        return np.array([T - 1]), lambda design, y_obs: (design @ b1)[:, None], var
    ref = CONTROL if model is SensitivityModel.J2R else group
    obs = np.arange(k)
    mis = np.arange(k, T)
    a, schur = regression_operator(fit.Sigma(ref), obs, mis)
    beta_obs = fit.Beta(group)[:k]
    beta_mis = fit.Beta(ref)[k:]

    def mean_fn(design, y_obs):
        return design @ beta_mis.T + (y_obs - design @ beta_obs.T) @ a.T

    return mis, mean_fn, schur


def law_blocks(fit: MmrmFit, dataset: TrialDataset, model) -> list[LawBlock]:
    """Imputation laws for every incomplete subject, grouped by (arm, pattern)."""
    model = SensitivityModel.parse(model)
    T = dataset.n_visits
    if fit.n_visits != T or fit.n_covariates != dataset.n_covariates:
        raise ValueError("fit dimensions do not match dataset")
    design = dataset.design
    k_all = dataset.last_observed
    blocks = []
    for g in (CONTROL, TREATMENT):
        for k in range(1, T):
            subj = np.flatnonzero((dataset.group == g) & (k_all == k))
            if subj.size == 0:
                continue
            visits, mean_fn, cov = _block_params(fit, model, g, k, T)
            mean = mean_fn(design[subj], dataset.y[subj, :k])
            blocks.append(LawBlock(g, k, subj, visits, mean, cov))
    return blocks


def imputation_law(fit: MmrmFit, dataset: TrialDataset, i: int, model) -> ConditionalLaw:
    model = SensitivityModel.parse(model)
    T = dataset.n_visits
    k = int(dataset.r[i].sum())
    if k == T:
        raise ImputationLawError(f"subject {dataset.ids[i]} is complete; nothing to impute")
    g = int(dataset.group[i])
    visits, mean_fn, cov = _block_params(fit, model, g, k, T)
    mean = mean_fn(dataset.design[i : i + 1], dataset.y[i : i + 1, :k])[0]
    return ConditionalLaw(dataset.ids[i], tuple(int(v) + 1 for v in visits), GaussianLaw(mean, cov))


def laws_equal(a: ConditionalLaw, b: ConditionalLaw, tol: float = 1e-12) -> bool:
    return (
        a.visits == b.visits
        and np.allclose(a.law.mean, b.law.mean, rtol=0, atol=tol)
        and np.allclose(a.law.cov, b.law.cov, rtol=0, atol=tol)
    )


def mar_control_equivalence_check(fit: MmrmFit, dataset: TrialDataset) -> bool:
    """True iff J2R and MAR give the same law for every incomplete control."""
    incomplete = np.flatnonzero((dataset.group == CONTROL) & ~dataset.r[:, -1])
    return all(
        laws_equal(
            imputation_law(fit, dataset, i, SensitivityModel.J2R),
            imputation_law(fit, dataset, i, SensitivityModel.MAR),
        )
        for i in incomplete
    )
