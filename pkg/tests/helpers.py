"""Small random instances and brute-force oracles shared by the tests.

The oracles here are written directly from the model's joint density with
explicit Python loops; they share no code with the package's vectorized
conditionals.
"""
import numpy as np

from bcpmf.model import (FeatureState, HyperState, PrecisionMode, PrecisionState,
                         PriorConfig, SparseRatings)


def random_ratings(rng, N, M, density=0.6, cover=True):
    mask = rng.random((N, M)) < density
    if cover:
        for i in range(N):
            mask[i, rng.integers(M)] = True
        for j in range(M):
            mask[rng.integers(N), j] = True
    u, it = np.nonzero(mask)
    vals = rng.integers(1, 6, size=len(u)).astype(float)
    return SparseRatings.from_triplets(u, it, vals, N, M)


def random_spd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T / d + np.eye(d))


def random_instance(rng, N=4, M=5, d=2, use_user=1, use_side=1, mode="robust",
                    density=0.6, lo=0.5, hi=2.0):
    R = random_ratings(rng, N, M, density)
    st = FeatureState(rng.standard_normal((N, d)) * use_user, rng.standard_normal((M, d)),
                      rng.standard_normal((M, d)) * use_side, rng.standard_normal(N),
                      rng.standard_normal(M) + 3, use_user, use_side)
    mode = PrecisionMode(mode)
    if mode == PrecisionMode.CONSTANT:
        prec = PrecisionState.ones(N, M, rng.uniform(0.5, 2))
    elif mode == PrecisionMode.ROBUST:
        prec = PrecisionState(rng.uniform(0.5, 2, N), rng.uniform(0.5, 2, M),
                              rng.uniform(0.5, 2), mode)
    else:
        prec = PrecisionState(rng.uniform(lo, hi, N), rng.uniform(lo, hi, M),
                              rng.uniform(0.5, 2), mode, lo, hi)
    hyper = HyperState(rng.standard_normal(d), random_spd(rng, d),
                       rng.standard_normal(d), random_spd(rng, d),
                       rng.standard_normal(d), random_spd(rng, d))
    prior = PriorConfig(d=d, mu0=rng.standard_normal(d), beta0=1.5, nu0=d + 2.0,
                        W0=random_spd(rng, d, 0.5), a_user=2.5, b_user=1.5, a_item=1.7,
                        b_item=2.2, a_tau=3.0, b_tau=2.0, mu_gamma=0.3, lambda_gamma=1.3,
                        mu_eta=3.1, lambda_eta=0.7, use_user=use_user, use_side=use_side)
    return R, st, prec, hyper, prior


def loop_prediction(i, j, st, R):
    """Prediction for one cell written with explicit loops."""
    S = np.zeros(st.d)
    if st.use_user:
        S += st.U[i]
    if st.use_side:
        rated = [R.items[k] for k in range(len(R)) if R.users[k] == i]
        if rated:
            S += sum(st.W[k] for k in rated) / len(rated)
    return st.gamma[i] + st.eta[j] + float(S @ st.V[j])


def _log_gauss(x, mu, P):
    diff = x - mu
    return 0.5 * np.linalg.slogdet(P)[1] - 0.5 * diff @ P @ diff


def log_joint(R, st, prec, hyper, prior, include_hyper=False):
    """Unnormalized log density of everything, log 2*pi dropped."""
    lp = 0.0
    for k in range(len(R)):
        i, j, r = R.users[k], R.items[k], R.values[k]
        w = prec.tau * prec.alpha[i] * prec.beta[j]
        e = r - loop_prediction(i, j, st, R)
        lp += 0.5 * np.log(w) - 0.5 * w * e * e
    for i in range(len(st.gamma)):
        if st.use_user:
            lp += _log_gauss(st.U[i], hyper.mu_U, hyper.Lambda_U)
        lp += _log_gauss(np.array([st.gamma[i]]), np.array([prior.mu_gamma]),
                         np.array([[prior.lambda_gamma]]))
    for j in range(len(st.eta)):
        if st.use_user or st.use_side:
            lp += _log_gauss(st.V[j], hyper.mu_V, hyper.Lambda_V)
        if st.use_side:
            lp += _log_gauss(st.W[j], hyper.mu_W, hyper.Lambda_W)
        lp += _log_gauss(np.array([st.eta[j]]), np.array([prior.mu_eta]),
                         np.array([[prior.lambda_eta]]))
    if prec.mode != PrecisionMode.CONSTANT:
        for a in prec.alpha:
            lp += (prior.a_user - 1) * np.log(a) - prior.b_user * a
        for b in prec.beta:
            lp += (prior.a_item - 1) * np.log(b) - prior.b_item * b
    lp += (prior.a_tau - 1) * np.log(prec.tau) - prior.b_tau * prec.tau
    return lp


def quadratic_params(f, d):
    """(h, P) with f(x) = const + h.x - x.P.x / 2 for an exactly quadratic f.

    Uses unit-step differences, which are exact for quadratics up to rounding.
    """
    e = np.eye(d)
    f0 = f(np.zeros(d))
    fp = np.array([f(e[k]) for k in range(d)])
    fm = np.array([f(-e[k]) for k in range(d)])
    h = 0.5 * (fp - fm)
    P = np.empty((d, d))
    for k in range(d):
        for l in range(d):
            P[k, l] = -(f(e[k] + e[l]) - fp[k] - fp[l] + f0)
    return h, P


def gamma_params(f):
    """(shape, rate) with f(x) = const + (shape - 1) log x - rate x."""
    f1, f2, f4 = f(1.0), f(2.0), f(4.0)
    rate = (f2 - f1) - (f4 - f2)
    s = (f2 - f1 + rate) / np.log(2.0)
    return s + 1.0, rate
