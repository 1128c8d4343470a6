import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bcpmf.gibbs import Layout
from bcpmf.model import PrecisionMode, SparseRatings
from bcpmf.vi import (ElboUnavailable, ViConfig, block_updates, elbo, entry_sq_error,
                      expected_sq_error, full_update, init_state, predict, rating_term,
                      run_vi)

from helpers import loop_prediction, random_instance

seeds = st.integers(0, 2**31 - 1)


def _state(seed, N=4, M=5, d=2, use_user=1, use_side=1, mode="robust"):
    rng = np.random.default_rng(seed)
    R, feats, prec, hyper, prior = random_instance(rng, N, M, d, use_user, use_side, mode)
    vs = init_state(feats, prec, prior)
    lay = Layout(R)
    full_update(vs, lay, prior)  # spread the factors away from the initial point
    return R, vs, lay, prior, rng


def _sample_q(vs, rng):
    """One joint draw of every latent variable from the variational factors."""
    from bcpmf.model import FeatureState, PrecisionState
    draw = lambda m, S: np.array([rng.multivariate_normal(a, b) for a, b in zip(m, S)])
    U = draw(vs.mU, vs.SU) if vs.use_user else np.zeros_like(vs.mU)
    V = draw(vs.mV, vs.SV)
    W = draw(vs.mW, vs.SW) if vs.use_side else np.zeros_like(vs.mW)
    g = rng.normal(vs.m_gamma, 1 / np.sqrt(vs.l_gamma))
    e = rng.normal(vs.m_eta, 1 / np.sqrt(vs.l_eta))
    robust = vs.mode == PrecisionMode.ROBUST
    alpha = rng.gamma(vs.a_alpha, 1 / vs.b_alpha) if robust else np.ones(len(g))
    beta = rng.gamma(vs.a_beta, 1 / vs.b_beta) if robust else np.ones(len(e))
    tau = rng.gamma(vs.a_tau, 1 / vs.b_tau)
    hyp = {}
    for f in vs.families():
        h = vs.hyper[f]
        Lam = np.atleast_2d(stats.wishart(h.dof, h.scale).rvs(random_state=rng))
        mu = rng.multivariate_normal(h.mean, np.linalg.inv(h.beta * Lam))
        hyp[f] = (mu, Lam)
    return (FeatureState(U, V, W, g, e, vs.use_user, vs.use_side),
            PrecisionState(alpha, beta, tau, vs.mode), hyp)


def _log_p_minus_log_q(R, vs, prior, feats, prec, hyp):
    """Fully normalized log p(theta, R) - log q(theta) with scipy densities."""
    mvn = stats.multivariate_normal
    lp = 0.0
    for k in range(len(R)):
        i, j = R.users[k], R.items[k]
        w = prec.tau * prec.alpha[i] * prec.beta[j]
        lp += stats.norm.logpdf(R.values[k], loop_prediction(i, j, feats, R), 1 / np.sqrt(w))
    lq = 0.0
    for f in vs.families():
        mu, Lam = hyp[f]
        X = getattr(feats, f)
        cov = np.linalg.inv(Lam)
        lp += sum(mvn(mu, cov).logpdf(x) for x in X)
        lp += mvn(prior.mu0, cov / prior.beta0).logpdf(mu) + stats.wishart(prior.nu0, prior.W0).logpdf(Lam)
        m, S = getattr(vs, "m" + f), getattr(vs, "S" + f)
        lq += sum(mvn(a, b).logpdf(x) for a, b, x in zip(m, S, X))
        h = vs.hyper[f]
        lq += mvn(h.mean, np.linalg.inv(h.beta * Lam)).logpdf(mu) + stats.wishart(h.dof, h.scale).logpdf(Lam)
    lp += stats.norm.logpdf(feats.gamma, prior.mu_gamma, 1 / np.sqrt(prior.lambda_gamma)).sum()
    lp += stats.norm.logpdf(feats.eta, prior.mu_eta, 1 / np.sqrt(prior.lambda_eta)).sum()
    lq += stats.norm.logpdf(feats.gamma, vs.m_gamma, 1 / np.sqrt(vs.l_gamma)).sum()
    lq += stats.norm.logpdf(feats.eta, vs.m_eta, 1 / np.sqrt(vs.l_eta)).sum()
    gl = lambda x, a, b: stats.gamma.logpdf(x, a, scale=1 / b)
    lp += gl(prec.tau, prior.a_tau, prior.b_tau)
    lq += gl(prec.tau, vs.a_tau, vs.b_tau)
    if vs.mode == PrecisionMode.ROBUST:
        lp += gl(prec.alpha, prior.a_user, prior.b_user).sum() + gl(prec.beta, prior.a_item, prior.b_item).sum()
        lq += gl(prec.alpha, vs.a_alpha, vs.b_alpha).sum() + gl(prec.beta, vs.a_beta, vs.b_beta).sum()
    return lp - lq


@pytest.mark.parametrize("mode,use_user,use_side", [
    ("constant", 1, 0), ("robust", 1, 1), ("robust", 0, 1)])
def test_elbo_matches_monte_carlo(mode, use_user, use_side):
    R, vs, lay, prior, rng = _state(11, 3, 3, 2, use_user, use_side, mode)
    vals = np.array([_log_p_minus_log_q(R, vs, prior, *_sample_q(vs, rng)) for _ in range(3000)])
    # the analytic bound drops the log(2 pi) of the rating likelihood
    analytic = elbo(vs, lay, prior) - 0.5 * len(R) * np.log(2 * np.pi)
    se = vals.std() / np.sqrt(len(vals))
    assert abs(analytic - vals.mean()) < 4 * se, (analytic, vals.mean(), se)


@pytest.mark.parametrize("use_user,use_side", [(1, 0), (1, 1), (0, 1)])
def test_expected_squared_error_matches_monte_carlo(use_user, use_side):
    R, vs, lay, prior, rng = _state(12, 4, 4, 2, use_user, use_side, "robust")
    sums = {"user": [], "item": [], "global": []}
    ea, eb = vs.e_alpha, vs.e_beta
    for _ in range(4000):
        feats, _, _ = _sample_q(vs, rng)
        e2 = np.array([(r - loop_prediction(i, j, feats, R)) ** 2
                       for i, j, r in zip(R.users, R.items, R.values)])
        sums["user"].append(np.bincount(R.users, eb[R.items] * e2, minlength=4))
        sums["item"].append(np.bincount(R.items, ea[R.users] * e2, minlength=4))
        sums["global"].append(np.sum(ea[R.users] * eb[R.items] * e2))
    for which, draws in sums.items():
        draws = np.array(draws)
        se = draws.std(0) / np.sqrt(len(draws))
        got = expected_sq_error(vs, lay, which)
        assert np.all(np.abs(got - draws.mean(0)) < 4 * se + 1e-12), which
    # per-entry version agrees with the aggregated one
    per = entry_sq_error(vs, lay, R.users, R.items, R.values)
    assert np.sum(ea[R.users] * eb[R.items] * per) == pytest.approx(
        expected_sq_error(vs, lay, "global"), rel=1e-10)


@settings(max_examples=10, deadline=None)
@given(seeds, st.sampled_from(["constant", "robust"]), st.integers(0, 1))
def test_every_block_update_increases_the_bound(seed, mode, use_side):
    R, vs, lay, prior, _ = _state(seed, 5, 5, 2, 1, use_side, mode)
    prev = elbo(vs, lay, prior)
    for _ in range(5):
        for name, step in block_updates(vs, lay, prior):
            step()
            cur = elbo(vs, lay, prior)
            assert cur >= prev - 1e-8 * abs(prev), name
            prev = cur


@pytest.mark.parametrize("block", ["mU", "mV", "mW", "m_gamma", "m_eta"])
def test_block_optimum_is_local_maximum(block):
    R, vs, lay, prior, rng = _state(13, 5, 5, 2, 1, 1, "robust")
    name = {"mU": "user_features", "mV": "item_features", "mW": "side_features",
            "m_gamma": "user_bias", "m_eta": "item_bias"}[block]
    dict(block_updates(vs, lay, prior))[name]()
    best = elbo(vs, lay, prior)
    for _ in range(5):
        trial = vs.copy()
        arr = getattr(trial, block)
        # side factors are visited one item at a time, so only the last one
        # visited is guaranteed optimal given all the others
        rows = arr[-1:] if block == "mW" else arr
        rows += 1e-3 * rng.standard_normal(rows.shape)
        assert elbo(trial, lay, prior) < best


def test_truncated_mode_has_no_bound():
    R, vs, lay, prior, _ = _state(14, mode="truncated")
    with pytest.raises(ElboUnavailable):
        elbo(vs, lay, prior)
    with pytest.raises(ElboUnavailable):
        rating_term(vs, lay, R)
    # the point used in place of E[alpha] is the clamped Gamma mean
    assert np.all((vs.e_alpha >= 0.5) & (vs.e_alpha <= 2.0))
    res = run_vi(vs, prior, R, ViConfig(max_updates=3), R)
    assert len(res.curve) == 3 and np.isnan(res.curve[0]["elbo_train"])


def test_init_centres_gamma_factors_on_point_estimate():
    rng = np.random.default_rng(15)
    R, feats, prec, hyper, prior = random_instance(rng, mode="robust")
    vs = init_state(feats, prec, prior)
    np.testing.assert_allclose(vs.e_alpha, prec.alpha)
    np.testing.assert_allclose(vs.e_beta, prec.beta)
    assert vs.e_tau == pytest.approx(prec.tau)
    np.testing.assert_allclose(vs.PU[0], prior.nu0 * prior.W0)


def test_held_out_bound_uses_training_side_sets():
    R, vs, lay, prior, _ = _state(16, 4, 5, 2, 0, 1, "constant")
    held = SparseRatings.from_triplets([0, 1], [0, 0], [3.0, 4.0], 4, 5)
    # a layout built from the held-out pairs would give different side means
    got = rating_term(vs, lay, held)
    wrong = rating_term(vs, Layout(held), held)
    assert got != pytest.approx(wrong)
    e2 = entry_sq_error(vs, lay, held.users, held.items, held.values)
    from bcpmf.stochastic import e_log_gamma
    want = 0.5 * 2 * e_log_gamma(vs.a_tau, vs.b_tau) - 0.5 * vs.e_tau * e2.sum()
    assert got == pytest.approx(want, rel=1e-12)
    pred = predict(vs, lay, held.users, held.items)
    np.testing.assert_allclose(
        pred, [loop_prediction(i, j, vs.point_estimate(), R) for i, j in zip(held.users, held.items)])


def test_run_vi_stops_on_small_change_and_records_curve(tmp_path):
    R, vs, lay, prior, _ = _state(17, 6, 6, 2, 1, 0, "constant")
    res = run_vi(vs, prior, R, ViConfig(max_updates=500, elbo_rel_tol=1e-9), R)
    assert res.converged and len(res.curve) < 500
    e = [r["elbo_train"] for r in res.curve]
    assert np.all(np.diff(e) >= -1e-8 * np.abs(e[1:]))
    res.write_curve(tmp_path / "c.csv")
    head = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert head == "update,elbo_train,elbo_test,rmse_train,rmse_test"
