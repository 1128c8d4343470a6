import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcpmf.map_estimator import (FitHistory, MapConfig, _descend, energy, fit_biases,
                                 fit_features, fit_map, fit_precisions_mle, gradient,
                                 map_driven_scale_matrix)
from bcpmf.model import FeatureState, PrecisionMode, PrecisionState, SparseRatings, residuals

from helpers import random_instance, random_ratings

seeds = st.integers(0, 2**31 - 1)


def fd_gradient(params, prec, R, cfg, name, h=1e-6):
    arr = getattr(params, name)
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        up, dn = params.copy(), params.copy()
        getattr(up, name)[idx] += h
        getattr(dn, name)[idx] -= h
        out[idx] = (energy(up, prec, R, cfg) - energy(dn, prec, R, cfg)) / (2 * h)
    return out


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(1, 6), st.integers(1, 3),
       st.sampled_from([(1, 1), (1, 0), (0, 1)]))
def test_gradient_matches_central_differences(seed, N, M, d, fl):
    rng = np.random.default_rng(seed)
    R, params, prec, *_ = random_instance(rng, N, M, d, *fl, "robust")
    cfg = MapConfig(lambda_bias=0.1, lambda_feature=0.3)
    g = gradient(params, prec, R, cfg)
    for name in ("U", "V", "W", "gamma", "eta"):
        fd = fd_gradient(params, prec, R, cfg, name)
        an = getattr(g, "d" + name)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(an - fd) / scale) < 1e-6, name


def test_accepted_iterates_never_raise_energy():
    rng = np.random.default_rng(0)
    R = random_ratings(rng, 15, 12, 0.5)
    cfg = MapConfig(learning_rate=0.5, max_epochs=60, patience=1000, tol=0)
    params = FeatureState.zeros(15, 12, 3, 1, 1)
    params.U, params.V, params.W = (0.3 * rng.standard_normal((n, 3)) for n in (15, 12, 12))
    hist = FitHistory()
    prec = PrecisionState.ones(15, 12)
    _descend(params, ("U", "V", "W", "gamma", "eta"), prec, R, None, cfg, hist)
    assert np.all(np.diff(hist.energy) <= 0)
    # the initial step size was far too large and had to be cut
    assert hist.learning_rate < cfg.learning_rate


def test_early_stopping_returns_best_validation_iterate():
    rng = np.random.default_rng(1)
    R = random_ratings(rng, 30, 20, 0.3)
    mask = rng.random(len(R)) < 0.8
    train, val = R.subset(mask), R.subset(~mask)
    cfg = MapConfig(learning_rate=0.05, lambda_feature=1e-4, patience=3)
    biases = fit_biases(train, val, cfg)[:2]
    feats, hist = fit_features(train, val, biases, cfg, d=5)
    best = hist.val_rmse[hist.best_epoch]
    assert best == pytest.approx(np.nanmin(hist.val_rmse))
    got = np.sqrt(np.mean(residuals(feats, val, train=train) ** 2))
    assert got == pytest.approx(best, rel=1e-12)
    # stopped after patience non-improving epochs (or the energy converged)
    assert len(hist.val_rmse) - 1 <= max(hist.best_epoch + cfg.patience, 1) or \
        len(hist.val_rmse) - 1 == cfg.max_epochs


def test_bias_stage_recovers_additive_model():
    rng = np.random.default_rng(2)
    g, e = rng.normal(0, 0.5, 20), rng.normal(3, 0.5, 15)
    u, it = np.nonzero(np.ones((20, 15)))
    R = SparseRatings.from_triplets(u, it, g[u] + e[it], 20, 15, check_scale=False)
    cfg = MapConfig(learning_rate=0.05, lambda_bias=1e-6, max_epochs=3000, tol=1e-14)
    gamma, eta, _ = fit_biases(R, None, cfg)
    np.testing.assert_allclose(gamma[u] + eta[it], R.values, atol=1e-3)


def test_precision_mle_constant_mode_closed_form():
    rng = np.random.default_rng(3)
    R, params, *_ = random_instance(rng, 5, 5, 2, 1, 0, "constant")
    p = fit_precisions_mle(params, R, "constant")
    e = residuals(params, R)
    assert p.tau == pytest.approx(len(e) / np.sum(e * e), rel=1e-12)
    assert np.all(p.alpha == 1) and np.all(p.beta == 1)


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_precision_mle_is_stationary_point(seed):
    """At the fixed point the Gaussian log-likelihood has zero partial derivatives
    in log tau, log alpha_i and log beta_j."""
    rng = np.random.default_rng(seed)
    R, params, *_ = random_instance(rng, 5, 6, 2, 1, 1, "robust", density=0.7)
    p = fit_precisions_mle(params, R, "robust", max_sweeps=20000, tol=1e-14)
    e2 = residuals(params, R) ** 2
    w = p.tau * p.alpha[R.users] * p.beta[R.items]
    g_tau = 0.5 * np.sum(1 - w * e2)
    g_alpha = 0.5 * np.bincount(R.users, 1 - w * e2, minlength=5)
    g_beta = 0.5 * np.bincount(R.items, 1 - w * e2, minlength=6)
    capped = (p.alpha >= 1e8 * 0.999).any() or (p.beta >= 1e8 * 0.999).any()
    if not capped:
        assert abs(g_tau) < 1e-6 and np.max(np.abs(g_alpha)) < 1e-6
        assert np.max(np.abs(g_beta)) < 1e-6


def test_precision_mle_truncated_stays_in_bounds():
    rng = np.random.default_rng(4)
    R, params, *_ = random_instance(rng, 8, 8, 2, 1, 0, "robust")
    p = fit_precisions_mle(params, R, "truncated", 0.5, 2.0)
    p.validate()
    assert p.mode == PrecisionMode.TRUNCATED and (p.lo, p.hi) == (0.5, 2.0)


def test_map_driven_scale_matrix():
    U = np.array([[1.0, 2.0], [3.0, 0.0]])
    V = np.array([[1.0, 1.0]])
    f = FeatureState(U, V, np.zeros_like(V), np.zeros(2), np.zeros(1), 1, 0)
    W0 = map_driven_scale_matrix(f)
    np.testing.assert_allclose(np.diag(1 / np.diag(W0)), np.diag([0.5 * 10 + 0.5, 0.5 * 4 + 0.5]))
    assert W0[0, 1] == 0
    f.V[:] = 0
    f.U[:, 1] = 0
    with pytest.raises(ValueError):
        map_driven_scale_matrix(f)


def test_fit_map_end_to_end_small():
    rng = np.random.default_rng(5)
    R = random_ratings(rng, 40, 30, 0.3)
    mask = rng.random(len(R)) < 0.9
    res = fit_map(R.subset(mask), R.subset(~mask), MapConfig(), d=3, use_side=1,
                  mode="robust")
    res.features.validate()
    res.precisions.validate()
    assert res.precisions.mode == PrecisionMode.ROBUST


def test_config_validation():
    for kw in ({"learning_rate": 0}, {"momentum": 1.0}, {"lambda_bias": -1}):
        with pytest.raises(ValueError):
            MapConfig(**kw)
