"""Estimating-equation estimands on the final visit, solved over a pooled imputed sample.

Everything is expressed through an ``n x M`` endpoint matrix ``E`` and a
row-stochastic draw-weight matrix ``W``: complete subjects repeat their
observed y_T, incomplete subjects carry their M draws. DI uses W = 1/M,
the weighted bootstrap swaps in importance weights, and a single MI slice
is the case M = 1. Subject weights ``u`` enter every equation as
multipliers (they are 1 outside the bootstrap).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CONTROL, TREATMENT, TrialDataset
from .imputation import ImputationSet, endpoint_matrix

QUANTILE_TOL = 1e-12


class EstimandError(ValueError):
    pass


@dataclass(frozen=True)
class AteSimple:
    name = "ate"


@dataclass(frozen=True)
class AteAncova:
    name = "ate-ancova"


@dataclass(frozen=True)
class RiskDiff:
    c: float
    name = "risk"


@dataclass(frozen=True)
class Qte:
    q: float
    name = "qte"

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise EstimandError("quantile level must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class CdfCurve:
    grid: np.ndarray
    name = "cdf"

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or g.size == 0 or np.any(np.diff(g) <= 0):
            raise EstimandError("CDF grid must be a strictly increasing vector")
        object.__setattr__(self, "grid", g)


EstimandSpec = AteSimple | AteAncova | RiskDiff | Qte | CdfCurve


def parse_estimand(text: str, default_grid=None) -> EstimandSpec:
    """Parse ``ate``, ``ate-ancova``, ``risk:C``, ``qte:Q`` or ``cdf[:lo:hi:n]``."""
    head, _, rest = text.partition(":")
    head = head.lower()
    try:
        if head == "ate":
            return AteSimple()
        if head in ("ate-ancova", "ancova"):
            return AteAncova()
        if head == "risk":
            return RiskDiff(float(rest))
        if head == "qte":
            return Qte(float(rest))
        if head == "cdf":
            if rest:
                lo, hi, n = rest.split(":")
                return CdfCurve(np.linspace(float(lo), float(hi), int(n)))
            if default_grid is None:
                raise EstimandError("cdf needs a grid: cdf:lo:hi:n")
            return CdfCurve(default_grid)
    except ValueError as exc:
        raise EstimandError(f"cannot parse estimand {text!r}: {exc}") from None
    raise EstimandError(f"unknown estimand {text!r}")


def describe(spec: EstimandSpec) -> str:
    if isinstance(spec, RiskDiff):
        return f"risk:{spec.c:g}"
    if isinstance(spec, Qte):
        return f"qte:{spec.q:g}"
    if isinstance(spec, CdfCurve):
        return f"cdf:{spec.grid[0]:g}:{spec.grid[-1]:g}:{spec.grid.size}"
    return spec.name


@dataclass(frozen=True, eq=False)
class PointEstimate:
    tau_hat: float | np.ndarray
    tau_1: float | np.ndarray
    tau_2: float | np.ndarray
    method: str


def _group_masks(group):
    masks = [group == CONTROL, group == TREATMENT]
    if not all(m.any() for m in masks):
        raise EstimandError("empty group")
    return masks


def _weighted_mean(v, u, mask):
    tot = u[mask].sum()
    if not tot > 0:
        raise EstimandError("group has zero total weight")
    return float(u[mask] @ v[mask] / tot)


def ancova_design(design, group) -> np.ndarray:
    treated = (group == TREATMENT).astype(float)[:, None]
    return np.hstack([design, treated * design])


def _ancova(design, group, ybar, u):
    V = ancova_design(design, group)
    q = design.shape[1]
    VtU = V.T * u
    gram = VtU @ V
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise EstimandError("degenerate ANCOVA design")
    gamma = np.linalg.solve(gram, VtU @ ybar)
    xbar = u @ design / u.sum()
    t1 = float(xbar @ gamma[:q])
    t2 = float(xbar @ (gamma[:q] + gamma[q:]))
    return t1, t2, gamma


def weighted_quantile(values, weights, q) -> float:
    """Smallest t with F(t) >= q for the weighted empirical CDF (left-continuous inverse)."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    cum = np.cumsum(weights[order])
    tot = cum[-1]
    if not tot > 0:
        raise EstimandError("quantile of a zero-weight sample")
    j = int(np.searchsorted(cum, q * tot - QUANTILE_TOL * tot, side="left"))
    return float(v[min(j, v.size - 1)])


def weighted_cdf(values, weights, grid) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v = values[order]
    cum = np.concatenate([[0.0], np.cumsum(weights[order])])
    idx = np.searchsorted(v, grid, side="right")
    return np.clip(cum[idx] / cum[-1], 0.0, 1.0)


def estimate(spec: EstimandSpec, design, group, E, W=None, u=None, method="DI") -> PointEstimate:
    """Solve the pooled estimating equation for ``spec``.

    E: (n, M) endpoint values; W: (n, M) draw weights with unit row sums
    (default uniform); u: (n,) subject weights (default ones).
    """
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    n, M = E.shape
    W = np.full((n, M), 1.0 / M) if W is None else np.asarray(W, dtype=float)
    u = np.ones(n) if u is None else np.asarray(u, dtype=float)
    masks = _group_masks(group)

    if isinstance(spec, AteSimple):
        ybar = (W * E).sum(axis=1)
        t1, t2 = (_weighted_mean(ybar, u, m) for m in masks)
    elif isinstance(spec, AteAncova):
        ybar = (W * E).sum(axis=1)
        t1, t2, _ = _ancova(design, group, ybar, u)
    elif isinstance(spec, RiskDiff):
        p = (W * (E >= spec.c)).sum(axis=1)
        t1, t2 = (_weighted_mean(p, u, m) for m in masks)
    elif isinstance(spec, Qte):
        t1, t2 = (weighted_quantile(E[m].ravel(), (u[m, None] * W[m]).ravel(), spec.q) for m in masks)
    elif isinstance(spec, CdfCurve):
        t1, t2 = (weighted_cdf(E[m].ravel(), (u[m, None] * W[m]).ravel(), spec.grid) for m in masks)
    else:
        raise EstimandError(f"unsupported estimand {spec!r}")
    return PointEstimate(np.subtract(t2, t1) if isinstance(spec, CdfCurve) else t2 - t1, t1, t2, method)


def solve_di(iset: ImputationSet, dataset: TrialDataset, spec: EstimandSpec) -> PointEstimate:
    """DI estimate: one pooled solve over all M draws per incomplete subject."""
    return estimate(spec, dataset.design, dataset.group, endpoint_matrix(iset, dataset), method="DI")


def solve_complete(dataset: TrialDataset, endpoint, spec: EstimandSpec) -> PointEstimate:
    """Complete-data estimate from one completed final-visit vector (an MI slice)."""
    return estimate(spec, dataset.design, dataset.group, np.asarray(endpoint)[:, None], method="MI-per-dataset")


def silverman_bandwidth(v) -> float:
    v = np.asarray(v, dtype=float)
    sd = v.std(ddof=1)
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * v.size ** (-0.2)


def kde_at(v, t) -> float:
    h = silverman_bandwidth(v)
    if not h > 0:
        return 0.0
    z = (t - np.asarray(v)) / h
    return float(np.exp(-0.5 * z**2).sum() / (v.size * h * np.sqrt(2 * np.pi)))


def ancova_contrast_variance(design, group, y) -> float:
    """Model-based variance of x_bar'(gamma_treated-shift) plus the covariate-mean term."""
    V = ancova_design(design, group)
    n, k = V.shape
    q = design.shape[1]
    if n <= k:
        raise EstimandError("too few subjects for ANCOVA variance")
    gram = V.T @ V
    if np.linalg.matrix_rank(gram) < k:
        raise EstimandError("degenerate ANCOVA design")
    gram_inv = np.linalg.inv(gram)
    gamma = gram_inv @ V.T @ y
    resid = y - V @ gamma
    s2 = resid @ resid / (n - k)
    xbar = design.mean(axis=0)
    c = np.concatenate([np.zeros(q), xbar])
    var = s2 * c @ gram_inv @ c
    if q > 1:
        shift = gamma[q + 1 :]
        sx = np.atleast_2d(np.cov(design[:, 1:], rowvar=False))
        var += shift @ sx @ shift / n
    return float(var)


def complete_data_variance(dataset: TrialDataset, endpoint, spec: EstimandSpec, point: PointEstimate | None = None):
    """Within-imputation variance for one completed dataset."""
    y = np.asarray(endpoint, dtype=float)
    masks = _group_masks(dataset.group)
    ns = [int(m.sum()) for m in masks]
    if isinstance(spec, AteSimple):
        return float(sum(y[m].var(ddof=1) / nj for m, nj in zip(masks, ns)))
    if isinstance(spec, AteAncova):
        return ancova_contrast_variance(dataset.design, dataset.group, y)
    if isinstance(spec, RiskDiff):
        ps = [float((y[m] >= spec.c).mean()) for m in masks]
        return float(sum(p * (1 - p) / nj for p, nj in zip(ps, ns)))
    if isinstance(spec, Qte):
        point = point or solve_complete(dataset, y, spec)
        total = 0.0
        for m, nj, t in zip(masks, ns, (point.tau_1, point.tau_2)):
            f = kde_at(y[m], t)
            if not f > 0:
                raise EstimandError("density estimate is zero at the quantile; variance unstable")
            total += spec.q * (1 - spec.q) / (nj * f**2)
        return total
    if isinstance(spec, CdfCurve):
        out = np.zeros(spec.grid.size)
        for m, nj in zip(masks, ns):
            F = weighted_cdf(y[m], np.ones(nj), spec.grid)
            out += F * (1 - F) / nj
        return out
    raise EstimandError(f"unsupported estimand {spec!r}")
