"""Mean-field coordinate-ascent variational inference.

Every latent block gets its own factor: Gaussians for features and biases,
Gammas for precision factors and the global precision, and a Normal-Wishart
for each family's (mean, precision) pair.  Each block update is the exact
optimum given the other factors, so the lower bound never decreases in the
constant and robust precision models.

Constants that do not depend on any variational parameter (the log 2*pi
terms of every Gaussian density and entropy) are dropped; all other
normalizers are kept.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .gibbs import Layout, outer_flat
from .model import (FeatureState, PrecisionMode, PrecisionState, PriorConfig,
                    SparseRatings)
from .stochastic import (cholesky_jitter, e_log_gamma, e_logdet_wishart,
                         gamma_entropy, logdet, truncated_gamma_point,
                         wishart_entropy)


class ElboUnavailable(RuntimeError):
    """Raised when the lower bound is requested for the truncated precision model."""


@dataclass
class ViConfig:
    max_updates: int = 50
    elbo_rel_tol: float = 1e-6
    track_test_elbo: bool = True
    compute_elbo: bool = True

    def __post_init__(self):
        if self.max_updates < 1 or self.elbo_rel_tol <= 0:
            raise ValueError("max_updates and elbo_rel_tol must be positive")


@dataclass
class NWFactor:
    mean: np.ndarray
    beta: float
    dof: float
    scale: np.ndarray

    @property
    def e_precision(self):
        return self.dof * self.scale

    @property
    def e_logdet(self):
        return e_logdet_wishart(self.dof, self.scale)


@dataclass
class VariationalState:
    """Means and precisions of every factor, plus Gamma and Normal-Wishart parameters."""

    mU: np.ndarray
    PU: np.ndarray
    mV: np.ndarray
    PV: np.ndarray
    mW: np.ndarray
    PW: np.ndarray
    m_gamma: np.ndarray
    l_gamma: np.ndarray
    m_eta: np.ndarray
    l_eta: np.ndarray
    a_alpha: np.ndarray
    b_alpha: np.ndarray
    a_beta: np.ndarray
    b_beta: np.ndarray
    a_tau: float
    b_tau: float
    hyper: dict
    use_user: int = 1
    use_side: int = 0
    mode: PrecisionMode = PrecisionMode.CONSTANT
    lo: float = 0.0
    hi: float = np.inf
    # covariances cached from the precisions
    SU: np.ndarray = None
    SV: np.ndarray = None
    SW: np.ndarray = None

    def __post_init__(self):
        self.refresh_covariances()

    def refresh_covariances(self, which="UVW"):
        for f in which:
            P = getattr(self, "P" + f)
            setattr(self, "S" + f, _spd_inverse(P))

    @property
    def d(self):
        return self.mV.shape[1]

    # expectations of precision variables
    @property
    def e_alpha(self):
        if self.mode == PrecisionMode.CONSTANT:
            return np.ones(len(self.a_alpha))
        if self.mode == PrecisionMode.TRUNCATED:
            return truncated_gamma_point(self.a_alpha, self.b_alpha, self.lo, self.hi)
        return self.a_alpha / self.b_alpha

    @property
    def e_beta(self):
        if self.mode == PrecisionMode.CONSTANT:
            return np.ones(len(self.a_beta))
        if self.mode == PrecisionMode.TRUNCATED:
            return truncated_gamma_point(self.a_beta, self.b_beta, self.lo, self.hi)
        return self.a_beta / self.b_beta

    @property
    def e_tau(self):
        return self.a_tau / self.b_tau

    def families(self):
        out = []
        if self.use_user:
            out.append("U")
        if self.use_user or self.use_side:
            out.append("V")
        if self.use_side:
            out.append("W")
        return out

    def point_estimate(self) -> FeatureState:
        U = self.mU if self.use_user else np.zeros_like(self.mU)
        W = self.mW if self.use_side else np.zeros_like(self.mW)
        return FeatureState(U.copy(), self.mV.copy(), W.copy(), self.m_gamma.copy(),
                            self.m_eta.copy(), self.use_user, self.use_side)

    def precision_state(self) -> PrecisionState:
        return PrecisionState(self.e_alpha.copy(), self.e_beta.copy(), float(self.e_tau),
                              self.mode, self.lo, self.hi)

    def copy(self):
        kw = {}
        for k, v in vars(self).items():
            if k == "hyper":
                kw[k] = {f: NWFactor(h.mean.copy(), h.beta, h.dof, h.scale.copy())
                         for f, h in v.items()}
            elif isinstance(v, np.ndarray):
                kw[k] = v.copy()
            else:
                kw[k] = v
        for k in ("SU", "SV", "SW"):
            kw.pop(k)
        return VariationalState(**kw)


def _spd_inverse(P):
    L = cholesky_jitter(P)
    eye = np.broadcast_to(np.eye(P.shape[-1]), P.shape)
    Linv = np.linalg.solve(L, eye)
    S = np.swapaxes(Linv, -1, -2) @ Linv
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def init_state(features: FeatureState, prec: PrecisionState, prior: PriorConfig
               ) -> VariationalState:
    """Means from a point estimate, feature precisions at nu0 * W0, bias precisions at
    their prior values and Gamma factors centred on the given precisions."""
    N, d = features.U.shape
    M = features.V.shape[0]
    P0 = prior.nu0 * prior.W0

    def gamma_factor(a, value):
        value = np.asarray(value, float)
        return np.full(value.shape, float(a)), a / value

    aa, ba = gamma_factor(prior.a_user, prec.alpha)
    ab, bb = gamma_factor(prior.a_item, prec.beta)
    at, bt = gamma_factor(prior.a_tau, prec.tau)
    hyper = {f: NWFactor(prior.mu0.copy(), float(prior.beta0), float(prior.nu0),
                         prior.W0.copy()) for f in "UVW"}
    return VariationalState(
        features.U.copy(), np.broadcast_to(P0, (N, d, d)).copy(),
        features.V.copy(), np.broadcast_to(P0, (M, d, d)).copy(),
        features.W.copy(), np.broadcast_to(P0, (M, d, d)).copy(),
        features.gamma.copy(), np.full(N, prior.lambda_gamma),
        features.eta.copy(), np.full(M, prior.lambda_eta),
        aa, ba, ab, bb, float(at), float(bt), hyper,
        features.use_user, features.use_side, prec.mode, prec.lo, prec.hi)


# ---------------------------------------------------------------- derived moments

def side_mean_sums(vs, lay):
    return lay.indicator @ vs.mW


def effective_moments(vs: VariationalState, lay: Layout):
    """E[S_i] (N x d) and Cov[S_i] (N x d x d)."""
    N, d = vs.mU.shape
    s = np.zeros((N, d))
    cov = np.zeros((N, d, d))
    if vs.use_user:
        s += vs.mU
        cov += vs.SU
    if vs.use_side:
        c = lay.inv_n
        s += side_mean_sums(vs, lay) * c[:, None]
        cov += (lay.indicator @ vs.SW.reshape(len(vs.SW), -1)).reshape(N, d, d) * (c * c)[:, None, None]
    return s, cov


def _second_moment(m, S):
    return np.einsum("ni,nj->nij", m, m) + S


def expected_sq_error(vs, lay, which, moments=None):
    """Weighted sums of E[(r - r_hat)^2].

    which='user': per user, weighted by E[beta_j]; 'item': per item, weighted by
    E[alpha_i]; 'global': total weighted by E[alpha_i] E[beta_j].
    """
    N, M = len(vs.m_gamma), len(vs.m_eta)
    u, it = lay.users, lay.items
    has_feat = bool(vs.use_user or vs.use_side)
    if has_feat:
        s, cov_s = effective_moments(vs, lay) if moments is None else moments
        dot = np.einsum("nd,nd->n", s[u], vs.mV[it])
    else:
        dot = 0.0
    e0 = lay.values - vs.m_gamma[u] - vs.m_eta[it] - dot
    per_entry = e0 ** 2 + 1.0 / vs.l_gamma[u] + 1.0 / vs.l_eta[it]
    ea, eb = vs.e_alpha, vs.e_beta
    if which in ("user", "global"):
        wb = eb[it]
        out = np.bincount(u, wb * (per_entry - (dot ** 2 if has_feat else 0.0)), minlength=N)
        if has_feat:
            ESS = _second_moment(s, cov_s).reshape(N, -1)
            EVV = _second_moment(vs.mV, vs.SV).reshape(M, -1)
            out += np.einsum("nk,nk->n", ESS, lay.user_sum(wb, EVV))
        return out if which == "user" else float(ea @ out)
    if which == "item":
        wa = ea[u]
        out = np.bincount(it, wa * (per_entry - (dot ** 2 if has_feat else 0.0)), minlength=M)
        if has_feat:
            ESS = _second_moment(s, cov_s).reshape(N, -1)
            EVV = _second_moment(vs.mV, vs.SV).reshape(M, -1)
            out += np.einsum("nk,nk->n", EVV, lay.item_sum(wa, ESS))
        return out
    raise ValueError(which)


# ---------------------------------------------------------------- block updates

def update_hyper_factor(vs: VariationalState, family: str, prior: PriorConfig):
    """Normal-Wishart factor from the means and covariances of one family."""
    m = getattr(vs, "m" + family)
    S = getattr(vs, "S" + family)
    N, d = m.shape
    W0_inv = prior.W0_inv
    if N == 0:
        vs.hyper[family] = NWFactor(prior.mu0.copy(), prior.beta0, prior.nu0, prior.W0.copy())
        return vs.hyper[family]
    mbar = m.mean(axis=0)
    C = m - mbar
    diff = mbar - prior.mu0
    W_inv = (W0_inv + C.T @ C + S.sum(axis=0)
             + (N * prior.beta0 / (N + prior.beta0)) * np.outer(diff, diff))
    W_inv = 0.5 * (W_inv + W_inv.T)
    mean = (prior.beta0 * prior.mu0 + N * mbar) / (prior.beta0 + N)
    vs.hyper[family] = NWFactor(mean, float(prior.beta0 + N), float(prior.nu0 + N),
                                _spd_inverse(W_inv))
    return vs.hyper[family]


def _expected_prior(vs, family):
    h = vs.hyper[family]
    Lam = h.e_precision
    return Lam, Lam @ h.mean


def user_factor_params(vs, lay):
    """Natural parameters (h, P) of every user factor."""
    N, d = vs.mU.shape
    Lam, Lmu = _expected_prior(vs, "U")
    P = np.broadcast_to(Lam, (N, d, d)).copy()
    h = np.broadcast_to(Lmu, (N, d)).copy()
    if len(lay.values):
        eb = vs.e_beta[lay.items]
        EVV = _second_moment(vs.mV, vs.SV).reshape(len(vs.mV), -1)
        A = lay.user_sum(eb, EVV).reshape(N, d, d)
        t = lay.values - vs.m_gamma[lay.users] - vs.m_eta[lay.items]
        lin = lay.user_sum(eb * t, vs.mV)
        if vs.use_side:
            z = side_mean_sums(vs, lay) * lay.inv_n[:, None]
            lin -= np.einsum("nij,nj->ni", A, z)
        scale = vs.e_tau * vs.e_alpha
        P += scale[:, None, None] * A
        h += scale[:, None] * lin
    return h, P


def update_user_factors(vs, lay):
    if not vs.use_user:
        return
    h, P = user_factor_params(vs, lay)
    vs.PU = 0.5 * (P + np.swapaxes(P, 1, 2))
    vs.SU = _spd_inverse(vs.PU)
    vs.mU = np.einsum("nij,nj->ni", vs.SU, h)


def item_factor_params(vs, lay):
    M, d = vs.mV.shape
    Lam, Lmu = _expected_prior(vs, "V")
    P = np.broadcast_to(Lam, (M, d, d)).copy()
    h = np.broadcast_to(Lmu, (M, d)).copy()
    if len(lay.values):
        s, cov = effective_moments(vs, lay)
        ea = vs.e_alpha[lay.users]
        ESS = _second_moment(s, cov).reshape(len(s), -1)
        B = lay.item_sum(ea, ESS).reshape(M, d, d)
        t = lay.values - vs.m_gamma[lay.users] - vs.m_eta[lay.items]
        scale = vs.e_tau * vs.e_beta
        P += scale[:, None, None] * B
        h += scale[:, None] * lay.item_sum(ea * t, s)
    return h, P


def update_item_factors(vs, lay):
    if not (vs.use_user or vs.use_side):
        return
    h, P = item_factor_params(vs, lay)
    vs.PV = 0.5 * (P + np.swapaxes(P, 1, 2))
    vs.SV = _spd_inverse(vs.PV)
    vs.mV = np.einsum("nij,nj->ni", vs.SV, h)


def update_side_factors(vs, lay):
    """Sequential update of every side factor with incrementally maintained sums."""
    if not vs.use_side:
        return
    N, d = vs.mU.shape
    M = len(vs.mW)
    Lam, Lmu = _expected_prior(vs, "W")
    c = lay.inv_n
    eb = vs.e_beta[lay.items]
    EVV = _second_moment(vs.mV, vs.SV).reshape(M, -1)
    A = lay.user_sum(eb, EVV).reshape(N, d, d)
    t = lay.values - vs.m_gamma[lay.users] - vs.m_eta[lay.items]
    b = lay.user_sum(eb * t, vs.mV)
    if vs.use_user:
        b -= np.einsum("nij,nj->ni", A, vs.mU)
    coef = vs.e_tau * vs.e_alpha * c
    P_all = np.broadcast_to(Lam, (M, d, d)) + (
        lay.indicator_t @ ((coef * c)[:, None] * A.reshape(N, -1))).reshape(M, d, d)
    const = Lmu + lay.indicator_t @ (coef[:, None] * b)
    z = side_mean_sums(vs, lay)
    y = np.einsum("nij,nj->ni", A, z)
    ptr = lay.ratings.item_ptr
    mW, PW, SW = vs.mW, vs.PW, vs.SW
    for m in range(M):
        r = lay.users[lay.order[ptr[m]:ptr[m + 1]]]
        Pm = 0.5 * (P_all[m] + P_all[m].T)
        h = const[m]
        if len(r):
            h = h - (coef[r] * c[r]) @ y[r] + (Pm - Lam) @ mW[m]
        Sm = _spd_inverse(Pm)
        new = Sm @ h
        if len(r):
            delta = new - mW[m]
            y[r] += A[r] @ delta
        mW[m], PW[m], SW[m] = new, Pm, Sm


def bias_factor_params(vs, lay, prior, which):
    has_feat = bool(vs.use_user or vs.use_side)
    if has_feat:
        s, _ = effective_moments(vs, lay)
        dot = np.einsum("nd,nd->n", s[lay.users], vs.mV[lay.items])
    else:
        dot = 0.0
    w = vs.e_tau * vs.e_alpha[lay.users] * vs.e_beta[lay.items]
    if which == "user":
        e = lay.values - vs.m_eta[lay.items] - dot
        idx, size, mu0, lam0 = lay.users, len(vs.m_gamma), prior.mu_gamma, prior.lambda_gamma
    else:
        e = lay.values - vs.m_gamma[lay.users] - dot
        idx, size, mu0, lam0 = lay.items, len(vs.m_eta), prior.mu_eta, prior.lambda_eta
    lam = lam0 + np.bincount(idx, w, minlength=size)
    mean = (lam0 * mu0 + np.bincount(idx, w * e, minlength=size)) / lam
    return mean, lam


def update_bias_factors(vs, lay, prior, which="both"):
    if which in ("both", "user"):
        vs.m_gamma, vs.l_gamma = bias_factor_params(vs, lay, prior, "user")
    if which in ("both", "item"):
        vs.m_eta, vs.l_eta = bias_factor_params(vs, lay, prior, "item")


def update_precision_factors(vs, lay, prior, which="all"):
    """Gamma factors for alpha (user), beta (item) and tau (global)."""
    if vs.mode != PrecisionMode.CONSTANT:
        if which in ("all", "user"):
            vs.a_alpha = prior.a_user + 0.5 * lay.n
            vs.b_alpha = prior.b_user + 0.5 * vs.e_tau * expected_sq_error(vs, lay, "user")
        if which in ("all", "item"):
            vs.a_beta = prior.a_item + 0.5 * lay.m
            vs.b_beta = prior.b_item + 0.5 * vs.e_tau * expected_sq_error(vs, lay, "item")
    if which in ("all", "global"):
        vs.a_tau = prior.a_tau + 0.5 * len(lay.values)
        vs.b_tau = prior.b_tau + 0.5 * expected_sq_error(vs, lay, "global")


# ---------------------------------------------------------------- lower bound

def elbo_terms(vs: VariationalState, lay: Layout, prior: PriorConfig) -> dict:
    """Lower bound split into named groups (expected log joint pieces and entropies)."""
    if vs.mode == PrecisionMode.TRUNCATED:
        raise ElboUnavailable("ELBO unavailable for truncated precisions")
    robust = vs.mode == PrecisionMode.ROBUST
    d = vs.d
    terms = {}
    el_tau = e_log_gamma(vs.a_tau, vs.b_tau)
    el_alpha = e_log_gamma(vs.a_alpha, vs.b_alpha) if robust else np.zeros(len(vs.a_alpha))
    el_beta = e_log_gamma(vs.a_beta, vs.b_beta) if robust else np.zeros(len(vs.a_beta))
    sq = expected_sq_error(vs, lay, "global")
    terms["ratings"] = (0.5 * (len(lay.values) * el_tau + lay.n @ el_alpha + lay.m @ el_beta)
                        - 0.5 * vs.e_tau * sq)

    W0_inv = prior.W0_inv
    log_B0 = (-0.5 * prior.nu0 * logdet(prior.W0) - 0.5 * prior.nu0 * d * np.log(2.0)
              - special.multigammaln(0.5 * prior.nu0, d))
    for f in vs.families():
        h = vs.hyper[f]
        m = getattr(vs, "m" + f)
        S = getattr(vs, "S" + f)
        P = getattr(vs, "P" + f)
        L = h.e_logdet
        dm = m - h.mean
        quad = h.dof * (np.einsum("ni,ij,nj->", dm, h.scale, dm)
                        + np.einsum("ij,nji->", h.scale, S)) + len(m) * d / h.beta
        terms[f"features_{f}"] = 0.5 * len(m) * L - 0.5 * quad
        d0 = h.mean - prior.mu0
        terms[f"hyper_{f}"] = (0.5 * (d * np.log(prior.beta0) + L)
                               - 0.5 * prior.beta0 * (h.dof * d0 @ h.scale @ d0 + d / h.beta)
                               + log_B0 + 0.5 * (prior.nu0 - d - 1) * L
                               - 0.5 * h.dof * np.trace(W0_inv @ h.scale))
        terms[f"entropy_{f}"] = 0.5 * len(m) * d - 0.5 * float(np.sum(logdet(P)))
        terms[f"entropy_hyper_{f}"] = (0.5 * d - 0.5 * (d * np.log(h.beta) + L)
                                       + wishart_entropy(h.dof, h.scale))

    for name, m, l, mu0, lam0 in (("gamma", vs.m_gamma, vs.l_gamma, prior.mu_gamma, prior.lambda_gamma),
                                  ("eta", vs.m_eta, vs.l_eta, prior.mu_eta, prior.lambda_eta)):
        terms[f"bias_{name}"] = float(np.sum(0.5 * np.log(lam0)
                                             - 0.5 * lam0 * ((m - mu0) ** 2 + 1.0 / l)))
        terms[f"entropy_{name}"] = float(np.sum(0.5 - 0.5 * np.log(l)))

    def gamma_prior(a0, b0, a, b):
        return float(np.sum(a0 * np.log(b0) - special.gammaln(a0)
                            + (a0 - 1) * e_log_gamma(a, b) - b0 * a / b))

    terms["prior_tau"] = gamma_prior(prior.a_tau, prior.b_tau, vs.a_tau, vs.b_tau)
    terms["entropy_tau"] = float(gamma_entropy(vs.a_tau, vs.b_tau))
    if robust:
        terms["prior_alpha"] = gamma_prior(prior.a_user, prior.b_user, vs.a_alpha, vs.b_alpha)
        terms["prior_beta"] = gamma_prior(prior.a_item, prior.b_item, vs.a_beta, vs.b_beta)
        terms["entropy_alpha"] = float(np.sum(gamma_entropy(vs.a_alpha, vs.b_alpha)))
        terms["entropy_beta"] = float(np.sum(gamma_entropy(vs.a_beta, vs.b_beta)))
    return {k: float(v) for k, v in terms.items()}


def elbo(vs, lay, prior) -> float:
    return float(sum(elbo_terms(vs, lay, prior).values()))


def entry_sq_error(vs, train_lay, users, items, values, chunk=20000):
    """Per-entry E[(r - r_hat)^2] for arbitrary pairs, with side moments taken
    from the training rating sets."""
    users, items = np.asarray(users), np.asarray(items)
    out = np.empty(len(users))
    has_feat = bool(vs.use_user or vs.use_side)
    if has_feat:
        s, cov = effective_moments(vs, train_lay)
    for lo in range(0, len(users), chunk):
        u, it = users[lo:lo + chunk], items[lo:lo + chunk]
        e = values[lo:lo + chunk] - vs.m_gamma[u] - vs.m_eta[it]
        extra = 1.0 / vs.l_gamma[u] + 1.0 / vs.l_eta[it]
        if has_feat:
            su, mv = s[u], vs.mV[it]
            e = e - np.einsum("nd,nd->n", su, mv)
            extra = (extra + np.einsum("ni,nij,nj->n", su, vs.SV[it], su)
                     + np.einsum("ni,nij,nj->n", mv, cov[u], mv)
                     + np.einsum("nij,nji->n", vs.SV[it], cov[u]))
        out[lo:lo + chunk] = e * e + extra
    return out


def rating_term(vs, train_lay, target: SparseRatings) -> float:
    """Expected log-likelihood of held-out ratings (the held-out bound)."""
    if vs.mode == PrecisionMode.TRUNCATED:
        raise ElboUnavailable("ELBO unavailable for truncated precisions")
    robust = vs.mode == PrecisionMode.ROBUST
    u, it = target.users, target.items
    el = np.full(len(u), e_log_gamma(vs.a_tau, vs.b_tau))
    if robust:
        el += e_log_gamma(vs.a_alpha, vs.b_alpha)[u] + e_log_gamma(vs.a_beta, vs.b_beta)[it]
    e2 = entry_sq_error(vs, train_lay, u, it, target.values)
    w = vs.e_tau * vs.e_alpha[u] * vs.e_beta[it]
    return float(0.5 * el.sum() - 0.5 * np.sum(w * e2))


# ---------------------------------------------------------------- driver

def predict(vs: VariationalState, train_lay: Layout, users, items):
    """Posterior-mean prediction; the side term uses training rating sets."""
    users, items = np.asarray(users), np.asarray(items)
    out = vs.m_gamma[users] + vs.m_eta[items]
    if vs.use_user or vs.use_side:
        s = np.zeros_like(vs.mU)
        if vs.use_user:
            s += vs.mU
        if vs.use_side:
            s += side_mean_sums(vs, train_lay) * train_lay.inv_n[:, None]
        out = out + np.einsum("nd,nd->n", s[users], vs.mV[items])
    return out


def full_update(vs, lay, prior):
    """One pass of every block in the fixed order: hyper factors, users, items,
    side features, global precision."""
    for f in vs.families():
        update_hyper_factor(vs, f, prior)
    update_user_factors(vs, lay)
    update_bias_factors(vs, lay, prior, "user")
    update_precision_factors(vs, lay, prior, "user")
    update_item_factors(vs, lay)
    update_bias_factors(vs, lay, prior, "item")
    update_precision_factors(vs, lay, prior, "item")
    update_side_factors(vs, lay)
    update_precision_factors(vs, lay, prior, "global")


def block_updates(vs, lay, prior):
    """The same pass as ``full_update`` as a list of named callables (for checks)."""
    steps = [(f"hyper_{f}", lambda f=f: update_hyper_factor(vs, f, prior)) for f in vs.families()]
    steps += [
        ("user_features", lambda: update_user_factors(vs, lay)),
        ("user_bias", lambda: update_bias_factors(vs, lay, prior, "user")),
        ("user_precision", lambda: update_precision_factors(vs, lay, prior, "user")),
        ("item_features", lambda: update_item_factors(vs, lay)),
        ("item_bias", lambda: update_bias_factors(vs, lay, prior, "item")),
        ("item_precision", lambda: update_precision_factors(vs, lay, prior, "item")),
        ("side_features", lambda: update_side_factors(vs, lay)),
        ("global_precision", lambda: update_precision_factors(vs, lay, prior, "global")),
    ]
    return steps


@dataclass
class ViResult:
    state: VariationalState
    curve: list = field(default_factory=list)
    test_prediction: np.ndarray = None
    converged: bool = False

    def write_curve(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["update", "elbo_train", "elbo_test",
                                               "rmse_train", "rmse_test"])
            w.writeheader()
            w.writerows(self.curve)


def _rmse(pred, truth):
    return float(np.sqrt(np.mean((pred - truth) ** 2))) if len(truth) else float("nan")


def run_vi(init: VariationalState, prior: PriorConfig, train: SparseRatings, cfg: ViConfig,
           target: SparseRatings | None = None, callback=None) -> ViResult:
    """Coordinate ascent until ``max_updates`` or a small relative change of the bound.

    In the truncated model the bound is unavailable; the curve then records
    NaN and the run lasts ``max_updates`` passes.
    """
    vs = init.copy()
    lay = Layout(train)
    has_target = target is not None and len(target) > 0
    curve = []
    prev = None
    converged = False
    has_bound = cfg.compute_elbo and vs.mode != PrecisionMode.TRUNCATED
    for t in range(1, cfg.max_updates + 1):
        full_update(vs, lay, prior)
        row = {"update": t}
        row["elbo_train"] = elbo(vs, lay, prior) if has_bound else float("nan")
        row["elbo_test"] = (rating_term(vs, lay, target)
                            if (has_target and cfg.track_test_elbo
                                and vs.mode != PrecisionMode.TRUNCATED)
                            else float("nan"))
        row["rmse_train"] = _rmse(predict(vs, lay, train.users, train.items), train.values)
        row["rmse_test"] = (_rmse(predict(vs, lay, target.users, target.items), target.values)
                            if has_target else float("nan"))
        curve.append(row)
        if callback is not None:
            callback(t, vs, row)
        if has_bound and prev is not None:
            if abs(row["elbo_train"] - prev) <= cfg.elbo_rel_tol * abs(prev):
                converged = True
                break
        prev = row["elbo_train"] if has_bound else None
    pred = predict(vs, lay, target.users, target.items) if has_target else None
    return ViResult(vs, curve, pred, converged)
