import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distimp.data import TrialDataset
from distimp.mmrm import MmrmFit, MmrmFitError, fit, from_mvn, mvn_to_sequential, observed_loglik, sequential_to_mvn

from conftest import random_monotone
from oracles import direct_mle, fd_score, group_loglik, small_mmrm_dataset


@pytest.mark.parametrize("seed", range(3))
def test_fit_matches_direct_maximization(seed):
    ds = small_mmrm_dataset(seed)
    f = fit(ds)
    for g in (1, 2):
        m = ds.group == g
        beta, sigma = direct_mle(ds.design[m], ds.y[m], ds.r[m])
        np.testing.assert_allclose(f.Beta(g), beta, atol=1e-4, rtol=0)
        np.testing.assert_allclose(f.Sigma(g), sigma, atol=1e-4, rtol=0)


@pytest.mark.parametrize("seed", range(3))
def test_score_vanishes_at_fit(seed):
    ds = small_mmrm_dataset(seed)
    f = fit(ds)
    for g in (1, 2):
        m = ds.group == g
        grad = fd_score(f.Beta(g), f.Sigma(g), ds.design[m], ds.y[m], ds.r[m])
        assert np.abs(grad).max() < 1e-5 * ds.n_subjects


def test_loglik_matches_per_subject_oracle():
    ds = small_mmrm_dataset(7)
    f = fit(ds)
    want = sum(group_loglik(f.Beta(g), f.Sigma(g), ds.design[ds.group == g], ds.y[ds.group == g],
                            ds.r[ds.group == g]) for g in (1, 2))
    assert f.loglik == pytest.approx(want, rel=1e-12)
    assert observed_loglik(f, ds) == pytest.approx(want, rel=1e-12)


def test_complete_data_fit_is_sample_regression():
    rng = np.random.default_rng(3)
    ds = random_monotone(rng, 60, 3, 2, drop=0.0)
    f = fit(ds)
    for g in (1, 2):
        m = ds.group == g
        D = ds.design[m]
        coef = np.linalg.lstsq(D, ds.y[m], rcond=None)[0]
        resid = ds.y[m] - D @ coef
        np.testing.assert_allclose(f.Beta(g), coef.T, atol=1e-10)
        np.testing.assert_allclose(f.Sigma(g), resid.T @ resid / m.sum(), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 5), q=st.integers(1, 4))
def test_sequential_mvn_round_trip(seed, T, q):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((T, T))
    sigma = A @ A.T + 0.3 * np.eye(T)
    beta = rng.standard_normal((T, q))
    alpha, resid = mvn_to_sequential(beta, sigma)
    b2, s2 = sequential_to_mvn(alpha, resid, q)
    np.testing.assert_allclose(b2, beta, atol=1e-9)
    np.testing.assert_allclose(s2, sigma, atol=1e-9)


def test_integer_weights_equal_duplication():
    rng = np.random.default_rng(4)
    ds = random_monotone(rng, 30, 3, 1)
    w = rng.integers(0, 3, ds.n_subjects).astype(float)
    w[[0, 30]] = 1.0
    rep = np.repeat(np.arange(ds.n_subjects), w.astype(int))
    dup = TrialDataset(ds.x[rep], ds.group[rep], ds.y[rep], ds.r[rep])
    a, b = fit(ds, w), fit(dup)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-10)
    np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-10)
    assert a.loglik == pytest.approx(b.loglik, rel=1e-10)


def test_too_few_subjects_raises():
    rng = np.random.default_rng(0)
    ds = random_monotone(rng, 3, 3, 2)
    with pytest.raises(MmrmFitError, match="group 1"):
        fit(ds)


@pytest.mark.parametrize("w", [np.full(4, -1.0), np.array([1.0, np.nan, 1.0, 1.0]), np.ones(3)])
def test_bad_weights(w):
    ds = TrialDataset(np.zeros((4, 0)), [1, 1, 2, 2], np.arange(4.0)[:, None], np.ones((4, 1), bool))
    with pytest.raises(ValueError):
        fit(ds, w)


def test_serialization_round_trip(tmp_path, small_trial):
    f = fit(small_trial)
    f.to_json(tmp_path / "f.json")
    back = MmrmFit.from_dict(json.loads((tmp_path / "f.json").read_text()))
    assert back.fingerprint() == f.fingerprint()
    assert np.array_equal(back.sigma, f.sigma)


def test_from_mvn_keeps_parameters(small_trial):
    f = fit(small_trial)
    g = from_mvn(f.beta, f.sigma)
    np.testing.assert_allclose(g.resid_var, f.resid_var, rtol=1e-10)
    assert g.fingerprint() == f.fingerprint()
