"""Synthetic two-arm, five-visit trials and Monte Carlo evaluation of MI vs DI."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm

from .data import CONTROL, TREATMENT, TrialDataset
from .estimands import AteAncova, AteSimple, EstimandSpec, Qte, RiskDiff, describe
from .imputation import derive_seeds, impute
from .inference import BootstrapConfig, InferenceError, mi_inference, weighted_bootstrap
from .mmrm import MmrmFitError, from_mvn
from .mmrm import fit as fit_mmrm
from .sensitivity import SensitivityModel, law_blocks

log = logging.getLogger(__name__)

# Benchmark scenario, stated to two decimals; rows are visits, columns (1, x1, x2, x3).
BENCHMARK_BETA_CONTROL = np.array(
    [
        [0.50, 1.00, -3.00, 2.00],
        [0.73, 0.80, -1.46, 0.16],
        [1.55, -0.07, 1.31, -0.09],
        [2.19, -0.08, -1.35, 0.95],
        [4.29, 0.62, -1.76, 1.30],
    ]
)
BENCHMARK_BETA_TREATMENT = np.array(
    [
        [0.50, 1.00, -3.00, 2.00],
        [2.16, 1.08, -2.24, 1.23],
        [7.31, 0.39, -3.29, 0.88],
        [6.45, 1.05, -0.22, 0.18],
        [5.82, 0.09, 0.83, -0.47],
    ]
)
BENCHMARK_SIGMA_CONTROL = np.array(
    [
        [4.00, 2.66, -0.63, 1.58, 1.93],
        [2.66, 5.01, 0.34, 1.10, 1.81],
        [-0.63, 0.34, 4.27, 0.98, 0.42],
        [1.58, 1.10, 0.98, 5.41, 3.09],
        [1.93, 1.81, 0.42, 3.09, 6.99],
    ]
)
BENCHMARK_SIGMA_TREATMENT = np.array(
    [
        [4.00, 2.91, 2.28, 0.12, 0.21],
        [2.91, 5.36, 4.74, 1.99, 0.73],
        [2.28, 4.74, 8.23, 2.63, -0.22],
        [0.12, 1.99, 2.63, 5.67, 0.37],
        [0.21, 0.73, -0.22, 0.37, 5.16],
    ]
)
# (intercept, slope on previous outcome) of the per-visit dropout logit, by arm
BENCHMARK_PHI = ((-3.2, 0.2), (-4.0, 0.2))
RISK_THRESHOLD = 4.5
QTE_LEVEL = 0.5

BENCHMARK_TRUTH = {
    ("j2r", "ate"): 1.5400,
    ("rtb", "ate"): 1.5896,
    ("washout", "ate"): 0.7858,
    ("rtb", "risk"): 0.2192,
    ("j2r", "risk"): 0.2197,
    ("washout", "risk"): 0.1478,
    ("rtb", "qte"): 1.8120,
    ("j2r", "qte"): 1.5570,
    ("washout", "qte"): 1.1313,
}
PRESETS = tuple(f"{m}-{e}" for m in ("j2r", "rtb", "washout") for e in ("ate", "risk", "qte"))


@dataclass(frozen=True, eq=False)
class SimScenario:
    beta: np.ndarray = field(default_factory=lambda: np.array([BENCHMARK_BETA_CONTROL, BENCHMARK_BETA_TREATMENT]))
    sigma: np.ndarray = field(default_factory=lambda: np.array([BENCHMARK_SIGMA_CONTROL, BENCHMARK_SIGMA_TREATMENT]))
    phi: tuple = BENCHMARK_PHI
    N: int = 1000
    M: int = 100
    B: int = 100
    model: SensitivityModel = SensitivityModel.J2R
    spec: EstimandSpec = field(default_factory=AteAncova)
    n_reps: int = 500
    seed: int = 0
    weight_scheme: str = "exp1"
    true_tau: float | None = None
    truth_source: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "model", SensitivityModel.parse(self.model))
        beta = np.asarray(self.beta, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if beta.ndim != 3 or beta.shape[0] != 2 or sigma.shape != (2, beta.shape[1], beta.shape[1]):
            raise ValueError("beta must be (2, T, p+1) and sigma (2, T, T)")
        for s in sigma:
            np.linalg.cholesky(s)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_visits(self) -> int:
        return self.beta.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.beta.shape[2] - 1

    def resolved(self) -> dict:
        """Plain description of every setting that affects results."""
        return {
            "N": self.N,
            "M": self.M,
            "B": self.B,
            "model": self.model.value,
            "estimand": describe(self.spec),
            "n_reps": self.n_reps,
            "seed": self.seed,
            "weight_scheme": self.weight_scheme,
            "phi": [list(p) for p in self.phi],
            "true_tau": self.true_tau,
            "truth_source": self.truth_source,
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
        }


def estimand_key(spec: EstimandSpec) -> str:
    if isinstance(spec, (AteAncova, AteSimple)):
        return "ate"
    if isinstance(spec, RiskDiff):
        return "risk"
    if isinstance(spec, Qte):
        return "qte"
    return "cdf"


def preset(name: str, **overrides) -> SimScenario:
    """Scenario for one of ``PRESETS`` (``{j2r,rtb,washout}-{ate,risk,qte}``)."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    model, est = name.split("-")
    spec = {"ate": AteAncova(), "risk": RiskDiff(RISK_THRESHOLD), "qte": Qte(QTE_LEVEL)}[est]
    base = SimScenario(model=model, spec=spec, true_tau=BENCHMARK_TRUTH[(model, est)], truth_source="preset")
    return replace(base, **overrides)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def simulate_arm(rng, beta, sigma, phi, N):
    """Covariates, latent outcomes and monotone observed flags for one arm."""
    T, q = beta.shape
    x = rng.standard_normal((N, q - 1))
    y = np.column_stack([np.ones(N), x]) @ beta.T + rng.standard_normal((N, T)) @ np.linalg.cholesky(sigma).T
    r = np.ones((N, T), dtype=bool)
    u = rng.random((N, T - 1))
    for k in range(1, T):
        # phi gives the logit of dropping out at visit k given the previous outcome
        drop = u[:, k - 1] < expit(phi[0] + phi[1] * y[:, k - 1])
        r[:, k] = r[:, k - 1] & ~drop
    return x, y, r


def simulate_trial(scn: SimScenario, rep_seed, N: int | None = None, return_latent: bool = False):
    """One trial with N subjects per arm; ``rep_seed`` is an int or tuple key."""
    key = rep_seed if isinstance(rep_seed, tuple) else (rep_seed,)
    rng = _rng(*key, 0)
    N = scn.N if N is None else N
    xs, ys, rs, gs = [], [], [], []
    for j, g in enumerate((CONTROL, TREATMENT)):
        x, y, r = simulate_arm(rng, scn.beta[j], scn.sigma[j], scn.phi[j], N)
        xs.append(x)
        ys.append(y)
        rs.append(r)
        gs.append(np.full(N, g))
    y = np.vstack(ys)
    ds = TrialDataset(np.vstack(xs), np.concatenate(gs), y, np.vstack(rs))
    return (ds, y) if return_latent else ds


# --- population truth by brute force -------------------------------------------------


@dataclass
class _ArmAccumulator:
    """Per-arm endpoint laws: observed y_T values plus (mean, sd) for imputed endpoints."""

    observed: list = field(default_factory=list)
    means: list = field(default_factory=list)
    sds: list = field(default_factory=list)

    def finish(self):
        return np.concatenate(self.observed), np.concatenate(self.means), np.concatenate(self.sds)


def _arm_functional(spec, obs, mu, sd):
    """Population value of the arm-level estimand and its MC standard error."""
    n = obs.size + mu.size
    if isinstance(spec, (AteAncova, AteSimple)):
        v = np.concatenate([obs, mu])
        return v.mean(), v.std(ddof=1) / np.sqrt(n)
    if isinstance(spec, RiskDiff):
        v = np.concatenate([(obs >= spec.c).astype(float), norm.sf((spec.c - mu) / sd)])
        return v.mean(), v.std(ddof=1) / np.sqrt(n)
    if isinstance(spec, Qte):
        obs_sorted = np.sort(obs)

        def contrib(t):
            return np.searchsorted(obs_sorted, t, side="right") + norm.cdf((t - mu) / sd).sum()

        lo, hi = obs_sorted[0] - 10 * sd.max(), obs_sorted[-1] + 10 * sd.max()
        t = brentq(lambda t: contrib(t) / n - spec.q, lo, hi, xtol=1e-9)
        v = np.concatenate([(obs <= t).astype(float), norm.cdf((t - mu) / sd)])
        h = 0.05
        dens = (contrib(t + h) - contrib(t - h)) / (2 * h * n)
        return t, v.std(ddof=1) / np.sqrt(n) / dens
    raise ValueError(f"no brute-force truth for {spec!r}")


def brute_force_truth(scn: SimScenario, n_subjects: int = 10**7, seed: int = 20240101, chunk: int = 500_000):
    """Population tau under ``scn.model`` with ``n_subjects`` simulated subjects (half per arm).

    Endpoint laws of dropouts are applied analytically with the true
    parameters (conditional means for the ATE, Gaussian tail/CDF for the
    risk difference and quantile), so the only error is from sampling
    subjects. Returns (tau, mc_standard_error).
    """
    return brute_force_truths(scn, [scn.spec], n_subjects, seed, chunk)[0]


def brute_force_truths(scn: SimScenario, specs, n_subjects=10**7, seed=20240101, chunk=500_000):
    true_fit = from_mvn(scn.beta, scn.sigma)
    per_arm = n_subjects // 2
    acc = {g: _ArmAccumulator() for g in (CONTROL, TREATMENT)}
    done, c = 0, 0
    while done < per_arm:
        n = min(chunk, per_arm - done)
        ds = simulate_trial(scn, (seed, c), N=n)
        endpoint_mean = ds.y[:, -1].copy()
        endpoint_sd = np.zeros(ds.n_subjects)
        for block in law_blocks(true_fit, ds, scn.model):
            endpoint_mean[block.subjects] = block.mean[:, -1]
            endpoint_sd[block.subjects] = np.sqrt(block.cov[-1, -1])
        for g in (CONTROL, TREATMENT):
            m = ds.group == g
            complete = m & ds.r[:, -1]
            dropout = m & ~ds.r[:, -1]
            acc[g].observed.append(ds.y[complete, -1])
            acc[g].means.append(endpoint_mean[dropout])
            acc[g].sds.append(endpoint_sd[dropout])
        done += n
        c += 1
    arms = {g: acc[g].finish() for g in acc}
    out = []
    for spec in specs:
        (t1, s1), (t2, s2) = (_arm_functional(spec, *arms[g]) for g in (CONTROL, TREATMENT))
        out.append((float(t2 - t1), float(np.hypot(s1, s2))))
    return out


def true_tau(scn: SimScenario, n_subjects: int = 10**7) -> tuple[float, str]:
    """Preset constant if available, else the brute-force value."""
    if scn.true_tau is not None:
        return scn.true_tau, scn.truth_source
    value, se = brute_force_truth(scn, n_subjects)
    return value, f"brute-force (se {se:.2g})"


# --- Monte Carlo ---------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    point_est: float
    true_var: float
    var_est: float
    rel_bias: float
    coverage: float
    ci_length: float

    @classmethod
    def from_replicates(cls, estimates, variances, truth) -> "MetricsRow":
        est = np.asarray(estimates, dtype=float)
        var = np.asarray(variances, dtype=float)
        se = np.sqrt(var)
        mc_var = est.var(ddof=1)
        covered = (est - 1.96 * se <= truth) & (truth <= est + 1.96 * se)
        return cls(
            point_est=float(est.mean()),
            true_var=float(mc_var),
            var_est=float(var.mean()),
            rel_bias=relative_bias(var.mean(), mc_var),
            coverage=float(covered.mean()),
            ci_length=float((2 * 1.96 * se).mean()),
        )


def relative_bias(mean_var_est, mc_var) -> float:
    return float((mean_var_est - mc_var) / mc_var)


@dataclass(frozen=True)
class Replicate:
    rep: int
    ok: bool
    mi_tau: float = float("nan")
    mi_var: float = float("nan")
    di_tau: float = float("nan")
    di_var: float = float("nan")
    error: str = ""


def run_replicate(scn: SimScenario, rep: int) -> Replicate:
    """Simulate, fit, impute once, then MI (Rubin) and DI (weighted bootstrap) on the same draws."""
    imp_seed, boot_seed = derive_seeds(scn.seed, rep)
    try:
        ds = simulate_trial(scn, (scn.seed, rep))
        fit_hat = fit_mmrm(ds)
        iset = impute(fit_hat, ds, scn.model, scn.M, imp_seed)
        mi = mi_inference(iset, ds, scn.spec)
        di = weighted_bootstrap(iset, ds, fit_hat, scn.spec, BootstrapConfig(scn.B, scn.weight_scheme, boot_seed))
    except (MmrmFitError, InferenceError, ValueError, np.linalg.LinAlgError) as exc:
        return Replicate(rep, False, error=f"{type(exc).__name__}: {exc}")
    return Replicate(rep, True, mi.tau_hat, mi.variance, di.tau_hat, di.variance)


def _run_one(args):
    return run_replicate(*args)


@dataclass(frozen=True)
class MonteCarloResult:
    scenario: SimScenario
    truth: float
    mi: MetricsRow
    di: MetricsRow
    replicates: tuple
    failures: int


MAX_FAIL_FRACTION = 0.02


class MonteCarloError(RuntimeError):
    pass


def run_monte_carlo(scn: SimScenario, workers: int = 1, progress=None) -> MonteCarloResult:
    if scn.n_reps < 2:
        raise ValueError("need at least two replications")
    truth, _ = true_tau(scn)
    jobs = [(scn, rep) for rep in range(scn.n_reps)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reps = list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        reps = []
        for job in jobs:
            reps.append(_run_one(job))
            if progress:
                progress(len(reps), len(jobs))
    reps.sort(key=lambda r: r.rep)
    good = [r for r in reps if r.ok]
    failures = len(reps) - len(good)
    for r in reps:
        if not r.ok:
            log.warning("replication %d failed: %s", r.rep, r.error)
    if failures > MAX_FAIL_FRACTION * len(reps):
        raise MonteCarloError(f"{failures} of {len(reps)} replications failed")
    mi = MetricsRow.from_replicates([r.mi_tau for r in good], [r.mi_var for r in good], truth)
    di = MetricsRow.from_replicates([r.di_tau for r in good], [r.di_var for r in good], truth)
    return MonteCarloResult(scn, truth, mi, di, tuple(reps), failures)


TABLE_COLUMNS = ["N", "M", "method", "point_est", "true_var", "var_est", "rel_bias_pct", "coverage_pct", "ci_length"]


def write_metrics_csv(result: MonteCarloResult, path, config: dict | None = None):
    """Metrics table, one row per method. Resolved config goes in leading ``#`` lines."""
    scn = result.scenario
    cfg = dict(config or {})
    cfg.update(scn.resolved())
    cfg["truth_used"] = result.truth
    cfg["failed_replications"] = result.failures
    with open(path, "w", newline="") as fh:
        for key in sorted(cfg):
            fh.write(f"# {key} = {cfg[key]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for name, row in (("MI", result.mi), ("DI", result.di)):
            w.writerow(
                [
                    scn.N,
                    scn.M,
                    name,
                    repr(row.point_est),
                    repr(row.true_var),
                    repr(row.var_est),
                    repr(100 * row.rel_bias),
                    repr(100 * row.coverage),
                    repr(row.ci_length),
                ]
            )


def metrics_table(result: MonteCarloResult) -> str:
    lines = [f"{'':6}{'Point':>10}{'TrueVar':>10}{'VarEst':>10}{'RelBias%':>10}{'Cover%':>8}{'CIlen':>8}"]
    for name, row in (("MI", result.mi), ("DI", result.di)):
        lines.append(
            f"{name:6}{row.point_est:10.4f}{row.true_var:10.5f}{row.var_est:10.5f}"
            f"{100 * row.rel_bias:10.2f}{100 * row.coverage:8.1f}{row.ci_length:8.4f}"
        )
    return "\n".join(lines)


__all__ = [
    "PRESETS",
    "BENCHMARK_TRUTH",
    "SimScenario",
    "MetricsRow",
    "preset",
    "simulate_trial",
    "brute_force_truth",
    "brute_force_truths",
    "true_tau",
    "run_monte_carlo",
    "write_metrics_csv",
]
