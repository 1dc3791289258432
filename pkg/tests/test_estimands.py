import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distimp.estimands import (
    AteAncova,
    AteSimple,
    CdfCurve,
    EstimandError,
    Qte,
    RiskDiff,
    complete_data_variance,
    estimate,
    parse_estimand,
    solve_complete,
    solve_di,
    weighted_cdf,
    weighted_quantile,
)
from distimp.imputation import completed_endpoint, impute
from distimp.mmrm import fit

from oracles import plug_in_endpoint


def test_parse_estimand():
    assert parse_estimand("ate") == AteSimple()
    assert parse_estimand("ate-ancova") == AteAncova()
    assert parse_estimand("risk:4.5") == RiskDiff(4.5)
    assert parse_estimand("qte:0.5") == Qte(0.5)
    grid = parse_estimand("cdf:0:1:3").grid
    assert grid.tolist() == [0.0, 0.5, 1.0]


@pytest.mark.parametrize("text", ["qte:1.5", "risk:abc", "cdf", "cdf:1:0:3", "median"])
def test_parse_estimand_errors(text):
    with pytest.raises(EstimandError):
        parse_estimand(text)


def test_weighted_quantile_left_continuous():
    v = np.array([4.0, 1.0, 3.0, 2.0])
    w = np.ones(4)
    assert weighted_quantile(v, w, 0.5) == 2.0
    assert weighted_quantile(v, w, 0.5000001) == 3.0
    assert weighted_quantile(v, w, 0.25) == 1.0
    assert weighted_quantile(v, np.array([0.0, 1.0, 1.0, 0.0]), 0.5) == 1.0


def test_weighted_cdf_by_hand():
    F = weighted_cdf(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 1.0]), np.array([0.0, 1.0, 2.5, 3.0]))
    np.testing.assert_allclose(F, [0.0, 0.25, 0.75, 1.0])


def test_hand_examples():
    design = np.ones((4, 1))
    group = np.array([1, 1, 2, 2])
    y = np.array([1.0, 3.0, 4.0, 8.0])
    assert estimate(AteSimple(), design, group, y).tau_hat == 4.0
    assert estimate(AteAncova(), design, group, y).tau_hat == pytest.approx(4.0, abs=1e-12)
    assert estimate(RiskDiff(3.0), design, group, y).tau_hat == 0.5
    assert estimate(Qte(0.5), design, group, y).tau_hat == 3.0


def test_draw_weights_and_subject_weights():
    design = np.ones((3, 1))
    group = np.array([1, 2, 2])
    E = np.array([[0.0, 0.0], [1.0, 3.0], [5.0, 5.0]])
    W = np.array([[0.5, 0.5], [0.25, 0.75], [0.5, 0.5]])
    u = np.array([1.0, 1.0, 3.0])
    # treated mean: (1 * 2.5 + 3 * 5) / 4
    assert estimate(AteSimple(), design, group, E, W, u).tau_hat == pytest.approx(4.375)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), M=st.integers(1, 6))
def test_pooled_ate_equals_draw_average(seed, M):
    rng = np.random.default_rng(seed)
    n = 30
    design = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    group = np.repeat([1, 2], n // 2)
    E = rng.standard_normal((n, M))
    for spec in (AteSimple(), AteAncova()):
        pooled = estimate(spec, design, group, E).tau_hat
        averaged = estimate(spec, design, group, E.mean(axis=1)).tau_hat
        slices = np.mean([estimate(spec, design, group, E[:, m]).tau_hat for m in range(M)])
        assert pooled == pytest.approx(averaged, abs=1e-12)
        assert pooled == pytest.approx(slices, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_integer_subject_weights_equal_duplication(seed):
    rng = np.random.default_rng(seed)
    n = 20
    design = np.column_stack([np.ones(n), rng.standard_normal(n)])
    group = np.repeat([1, 2], n // 2)
    E = rng.standard_normal((n, 3))
    u = rng.integers(1, 4, n).astype(float)
    rep = np.repeat(np.arange(n), u.astype(int))
    for spec in (AteSimple(), AteAncova(), RiskDiff(0.0), Qte(0.3)):
        a = estimate(spec, design, group, E, u=u).tau_hat
        b = estimate(spec, design[rep], group[rep], E[rep]).tau_hat
        assert a == pytest.approx(b, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cdf_curve_is_monotone_in_each_arm(seed):
    rng = np.random.default_rng(seed)
    n = 25
    group = np.repeat([1, 2], [12, 13])
    E = rng.standard_normal((n, 4))
    W = rng.random((n, 4))
    W /= W.sum(axis=1, keepdims=True)
    pe = estimate(CdfCurve(np.linspace(-3, 3, 30)), np.ones((n, 1)), group, E, W)
    for curve in (pe.tau_1, pe.tau_2):
        assert np.all(np.diff(curve) >= 0)
        assert np.all((0 <= curve) & (curve <= 1))


def test_ancova_without_covariates_is_difference_in_means():
    rng = np.random.default_rng(1)
    group = np.repeat([1, 2], 10)
    y = rng.standard_normal(20)
    a = estimate(AteAncova(), np.ones((20, 1)), group, y).tau_hat
    b = estimate(AteSimple(), np.ones((20, 1)), group, y).tau_hat
    assert a == pytest.approx(b, abs=1e-12)


def test_di_tracks_plug_in_within_mc_error(small_trial):
    f = fit(small_trial)
    iset = impute(f, small_trial, "j2r", 4000, seed=9)
    di = solve_di(iset, small_trial, AteAncova()).tau_hat
    plug = solve_complete(small_trial, plug_in_endpoint(f, small_trial, "j2r"), AteAncova()).tau_hat
    slices = [solve_complete(small_trial, completed_endpoint(iset, small_trial, m), AteAncova()).tau_hat
              for m in range(1, 201)]
    se = np.std(slices, ddof=1) / np.sqrt(iset.M)
    assert abs(di - plug) < 4 * se


def test_qte_variance_matches_repeated_sampling():
    from distimp.data import TrialDataset

    rng = np.random.default_rng(0)
    n = 2000
    group = np.repeat([1, 2], n // 2)
    y = rng.standard_normal(n) + (group == 2) * 1.0
    ds = TrialDataset(np.zeros((n, 0)), group, y[:, None], np.ones((n, 1), bool))
    v = complete_data_variance(ds, y, Qte(0.5))
    fresh = [estimate(Qte(0.5), np.ones((n, 1)), group, rng.standard_normal(n)).tau_hat for _ in range(1000)]
    assert v == pytest.approx(np.var(fresh, ddof=1), rel=0.2)


def test_risk_and_ate_within_variance_by_hand():
    from distimp.data import TrialDataset

    y = np.array([1.0, 3.0, 4.0, 8.0, 5.0, 0.0])
    group = np.array([1, 1, 1, 2, 2, 2])
    ds = TrialDataset(np.zeros((6, 0)), group, y[:, None], np.ones((6, 1), bool))
    assert complete_data_variance(ds, y, AteSimple()) == pytest.approx(np.var([1, 3, 4], ddof=1) / 3
                                                                       + np.var([8, 5, 0], ddof=1) / 3)
    p1, p2 = 1 / 3, 2 / 3
    assert complete_data_variance(ds, y, RiskDiff(4.0)) == pytest.approx(p1 * (1 - p1) / 3 + p2 * (1 - p2) / 3)


def test_empty_arm_rejected():
    with pytest.raises(EstimandError):
        estimate(AteSimple(), np.ones((3, 1)), np.array([1, 1, 1]), np.zeros(3))
