"""Rubin's rule for MI and the importance-weighted bootstrap for DI."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import TrialDataset
from .estimands import EstimandSpec, complete_data_variance, estimate, solve_complete
from .gaussian import log_density_chol
from .imputation import ImputationSet, completed_endpoint, endpoint_matrix
from .mmrm import MmrmFit, MmrmFitError
from .mmrm import fit as fit_mmrm
from .sensitivity import law_blocks

log = logging.getLogger(__name__)

Z95 = 1.96
WEIGHT_SCHEMES = ("exp1", "poisson1", "unit")
MAX_DROP_FRACTION = 0.10


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    """``unit`` (all weights 1) is a zero-variance scheme for testing only."""

    B: int = 100
    weight_scheme: str = "exp1"
    seed: int = 0

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("B must be at least 2")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ValueError(f"weight_scheme must be one of {WEIGHT_SCHEMES}")

    def draw_weights(self, b: int, n: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), int(b)]))
        if self.weight_scheme == "exp1":
            return rng.exponential(1.0, n)
        if self.weight_scheme == "poisson1":
            return rng.poisson(1.0, n).astype(float)
        return np.ones(n)


@dataclass(frozen=True, eq=False)
class InferenceOutput:
    tau_hat: float | np.ndarray
    variance: float | np.ndarray
    se: float | np.ndarray
    ci: tuple
    p_value: float | np.ndarray
    method: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, np.generic):
                return v.item()
            if isinstance(v, (list, tuple)):
                return [conv(x) for x in v]
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            return v

        return conv(
            {
                "method": self.method,
                "tau_hat": self.tau_hat,
                "variance": self.variance,
                "se": self.se,
                "ci": list(self.ci),
                "p_value": self.p_value,
                "diagnostics": self.diagnostics,
            }
        )


def _scalar(v):
    v = np.asarray(v, dtype=float)
    return float(v) if v.ndim == 0 else v


def wald_summary(tau_hat, variance, method: str = "wald", diagnostics=None) -> InferenceOutput:
    """95% Wald interval and two-sided normal p-value."""
    tau = np.asarray(tau_hat, dtype=float)
    var = np.asarray(variance, dtype=float)
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    se = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(tau) / np.where(se > 0, se, 1.0), np.where(tau == 0, 0.0, np.inf))
    p = 2.0 * norm.sf(z)
    return InferenceOutput(
        _scalar(tau),
        _scalar(var),
        _scalar(se),
        (_scalar(tau - Z95 * se), _scalar(tau + Z95 * se)),
        _scalar(p),
        method,
        dict(diagnostics or {}),
    )


def rubin_combine(estimates, within_vars) -> InferenceOutput:
    """Average the M estimates; variance = mean within + (1 + 1/M) * between."""
    est = np.asarray(estimates, dtype=float)
    wv = np.asarray(within_vars, dtype=float)
    M = est.shape[0]
    if M < 2:
        raise ValueError("Rubin's rule needs at least two imputations")
    point = est.mean(axis=0)
    between = est.var(axis=0, ddof=1)
    within = wv.mean(axis=0)
    var = within + (1.0 + 1.0 / M) * between
    return wald_summary(point, var, "MI-Rubin", {"within": _scalar(within), "between": _scalar(between), "M": M})


def mi_inference(iset: ImputationSet, dataset: TrialDataset, spec: EstimandSpec) -> InferenceOutput:
    """Solve each completed dataset separately, then combine with Rubin's rule."""
    ests, wvs = [], []
    for m in range(1, iset.M + 1):
        y_m = completed_endpoint(iset, dataset, m)
        pe = solve_complete(dataset, y_m, spec)
        ests.append(pe.tau_hat)
        wvs.append(complete_data_variance(dataset, y_m, spec, pe))
    return rubin_combine(ests, wvs)


@dataclass(frozen=True, eq=False)
class ImportanceWeights:
    """Per law block, an (n_b, M) array of weights with unit row sums."""

    blocks: tuple
    weights: tuple
    M: int

    def matrix(self, n: int) -> np.ndarray:
        W = np.full((n, self.M), 1.0 / self.M)
        for block, w in zip(self.blocks, self.weights):
            W[block.subjects] = w
        return W

    def effective_sample_size(self) -> np.ndarray:
        if not self.weights:
            return np.array([float(self.M)])
        return np.concatenate([1.0 / (w**2).sum(axis=1) for w in self.weights])


def block_log_densities(blocks, draws) -> list:
    return [log_density_chol(d, blk.mean[:, None, :], blk.chol) for blk, d in zip(blocks, draws)]


def normalize_log_weights(logw: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    if not np.all(np.isfinite(logw)):
        raise InferenceError("non-finite log density ratio")
    z = np.exp(logw - logw.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def importance_reweight(
    iset: ImputationSet, dataset: TrialDataset, fit_hat: MmrmFit, fit_b: MmrmFit, base_logpdf=None
) -> ImportanceWeights:
    """Weights proportional to f(draw | obs, theta_b) / f(draw | obs, theta_hat), per subject."""
    if base_logpdf is None:
        hat_blocks = law_blocks(fit_hat, dataset, iset.model)
        base_logpdf = block_log_densities(hat_blocks, iset.draws)
    new_blocks = law_blocks(fit_b, dataset, iset.model)
    new_logpdf = block_log_densities(new_blocks, iset.draws)
    weights = tuple(normalize_log_weights(a - b) for a, b in zip(new_logpdf, base_logpdf))
    return ImportanceWeights(iset.blocks, weights, iset.M)


def replication_variance(replicates, center) -> float | np.ndarray:
    """sum_b (tau_b - center)^2 / (B - 1)."""
    reps = np.asarray(replicates, dtype=float)
    return ((reps - center) ** 2).sum(axis=0) / (reps.shape[0] - 1)


def weighted_bootstrap(
    iset: ImputationSet,
    dataset: TrialDataset,
    fit_hat: MmrmFit,
    spec: EstimandSpec,
    cfg: BootstrapConfig = BootstrapConfig(),
    keep_replicates: bool = False,
) -> InferenceOutput:
    """DI point estimate with replication variance from the weighted bootstrap.

    Each replicate draws subject weights u, refits the MMRM with them,
    reweights the existing draws by importance ratios and re-solves the
    u- and w-weighted estimating equation. Draws are never regenerated.
    """
    n = dataset.n_subjects
    design, group = dataset.design, dataset.group
    E = endpoint_matrix(iset, dataset)
    tau_di = estimate(spec, design, group, E).tau_hat
    hat_blocks = law_blocks(fit_hat, dataset, iset.model)
    base_logpdf = block_log_densities(hat_blocks, iset.draws)

    reps, dropped, ess = [], [], []
    for b in range(cfg.B):
        u = cfg.draw_weights(b, n)
        try:
            fit_b = fit_mmrm(dataset, u, with_loglik=False)
        except MmrmFitError as exc:
            dropped.append((b, str(exc)))
            log.debug("replicate %d dropped: %s", b, exc)
            continue
        iw = importance_reweight(iset, dataset, fit_hat, fit_b, base_logpdf)
        ess.append(iw.effective_sample_size().min())
        reps.append(estimate(spec, design, group, E, iw.matrix(n), u).tau_hat)
    if len(dropped) > MAX_DROP_FRACTION * cfg.B:
        raise InferenceError(f"{len(dropped)} of {cfg.B} bootstrap refits failed")
    if len(reps) < 2:
        raise InferenceError("fewer than two usable bootstrap replicates")
    reps = np.asarray(reps)
    var = replication_variance(reps, tau_di)
    diag = {
        "B": cfg.B,
        "B_used": len(reps),
        "dropped": dropped,
        "weight_scheme": cfg.weight_scheme,
        "min_ess": float(np.min(ess)) if ess else float(iset.M),
        "replicate_mean": _scalar(reps.mean(axis=0)),
        "replicate_sd": _scalar(reps.std(axis=0, ddof=1)),
    }
    if keep_replicates:
        diag["replicates"] = reps
    return wald_summary(tau_di, var, "DI-weighted-bootstrap", diag)
