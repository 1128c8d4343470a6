"""Gibbs sampler for the constrained factorization model.

One sweep visits, in order: Normal-Wishart hyper-parameters for the user,
item and side families; user features, user biases and user precision
factors; item features, item biases and item precision factors; side
features (one item at a time); and the global precision.  Per-entity blocks
within a family are conditionally independent, so each family is updated in
a single vectorized pass.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import (FeatureState, HyperState, PrecisionMode, PrecisionState,
                    PriorConfig, SparseRatings)
from .stochastic import (cholesky_jitter, draw_with_factor, gaussian_from_precision,
                         make_rng, sample_truncated_gamma, sample_wishart,
                         truncated_gamma_point)


@dataclass
class GibbsConfig:
    num_samples: int = 100
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    sample_hyper: bool = True
    sample_biases: bool = True
    sample_tau: bool = True
    # replace every draw by the mean of its conditional (debugging aid)
    deterministic: bool = False
    # assert SPD / positivity / bounds after each sweep
    check_invariants: bool = False
    trace_entities: int = 3
    threads: int = 1

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("burn_in must be >= 0 and thin >= 1")


class Layout:
    """Sparse bookkeeping reused across sweeps.

    Holds user-major (N x M) and item-major (M x N) CSR matrices whose data
    arrays are overwritten with entry-aligned weights, so weighted neighbour
    sums cost one sparse product each.
    """

    def __init__(self, ratings: SparseRatings):
        self.ratings = ratings
        self.users, self.items, self.values = ratings.users, ratings.items, ratings.values
        self.order = ratings.item_order
        self.n = ratings.user_counts
        self.m = ratings.item_counts
        self.inv_n = np.divide(1.0, self.n, out=np.zeros(len(self.n)), where=self.n > 0)
        self._um = ratings.user_matrix(np.ones(len(ratings)))
        self._im = ratings.item_matrix(np.ones(len(ratings)))
        self.indicator = ratings.user_matrix(np.ones(len(ratings)))
        self.indicator_t = ratings.item_matrix(np.ones(len(ratings)))

    def user_sum(self, w, X):
        """Row i: sum_j w_ij X_j over the items rated by user i."""
        self._um.data[:] = w
        return self._um @ X

    def item_sum(self, w, X):
        """Row j: sum_i w_ij X_i over the users who rated item j."""
        self._im.data[:] = w[self.order]
        return self._im @ X

    def raters(self, m):
        return self.users[self.order[self.ratings.item_ptr[m]:self.ratings.item_ptr[m + 1]]]


def outer_flat(X):
    """Row-wise outer products flattened to shape (n, d*d)."""
    return np.einsum("ni,nj->nij", X, X).reshape(len(X), -1)


def _side_sums(state, lay):
    return lay.indicator @ state.W


def _effective(state, lay, Z=None):
    S = state.use_user * state.U
    if state.use_side:
        Z = _side_sums(state, lay) if Z is None else Z
        S = S + Z * lay.inv_n[:, None]
    return S


def _predict(state, lay, S):
    return (state.gamma[lay.users] + state.eta[lay.items]
            + np.einsum("nd,nd->n", S[lay.users], state.V[lay.items]))


# ---------------------------------------------------------------- hyper-parameters

def hyper_posterior(X, mu0, beta0, nu0, W0_inv):
    """Normal-Wishart posterior (mean, beta, dof, scale) given the rows of X."""
    X = np.asarray(X, float)
    N, d = X.shape
    if N == 0:
        return mu0.copy(), float(beta0), float(nu0), np.linalg.inv(W0_inv)
    xbar = X.mean(axis=0)
    C = X - xbar
    scatter = C.T @ C
    diff = xbar - mu0
    W_inv = W0_inv + scatter + (N * beta0 / (N + beta0)) * np.outer(diff, diff)
    W_inv = 0.5 * (W_inv + W_inv.T)
    mu = (beta0 * mu0 + N * xbar) / (beta0 + N)
    return mu, float(beta0 + N), float(nu0 + N), np.linalg.inv(W_inv)


def step_hyperparams(X, prior: PriorConfig, rng, deterministic=False):
    """Draw (mu, Lambda) for one feature family.

    Lambda ~ Wishart(nu0 + N + offset, W~), then mu ~ N(mu~, ((N + beta0) Lambda)^-1).
    """
    mu_t, beta_t, nu_t, W_t = hyper_posterior(X, prior.mu0, prior.beta0, prior.nu0,
                                              prior.W0_inv)
    dof = nu_t + prior.hyper_dof_offset
    W_t = 0.5 * (W_t + W_t.T)
    if deterministic:
        return mu_t, dof * W_t
    Lam = sample_wishart(dof, W_t, rng)
    L = cholesky_jitter(beta_t * Lam)
    mu = draw_with_factor(mu_t, L, rng)
    return mu, Lam


# ---------------------------------------------------------------- conditionals

def user_conditionals(state: FeatureState, prec: PrecisionState, hyper: HyperState,
                      lay: Layout):
    """Natural parameters (h, P) of every U_i given everything else."""
    N, d = state.U.shape
    Lam, mu = hyper.Lambda_U, hyper.mu_U
    P = np.broadcast_to(Lam, (N, d, d)).copy()
    h = np.broadcast_to(Lam @ mu, (N, d)).copy()
    if state.use_user and len(lay.values):
        wb = prec.beta[lay.items]
        A = lay.user_sum(wb, outer_flat(state.V)).reshape(N, d, d)
        target = lay.values - state.gamma[lay.users] - state.eta[lay.items]
        if state.use_side:
            Zs = _side_sums(state, lay) * lay.inv_n[:, None]
            target = target - np.einsum("nd,nd->n", Zs[lay.users], state.V[lay.items])
        scale = prec.tau * prec.alpha
        P += scale[:, None, None] * A
        h += scale[:, None] * lay.user_sum(wb * target, state.V)
    return h, P


def item_conditionals(state, prec, hyper, lay, S=None):
    """Natural parameters (h, P) of every V_j given everything else."""
    M, d = state.V.shape
    Lam, mu = hyper.Lambda_V, hyper.mu_V
    P = np.broadcast_to(Lam, (M, d, d)).copy()
    h = np.broadcast_to(Lam @ mu, (M, d)).copy()
    if len(lay.values):
        S = _effective(state, lay) if S is None else S
        wa = prec.alpha[lay.users]
        B = lay.item_sum(wa, outer_flat(S)).reshape(M, d, d)
        target = lay.values - state.gamma[lay.users] - state.eta[lay.items]
        scale = prec.tau * prec.beta
        P += scale[:, None, None] * B
        h += scale[:, None] * lay.item_sum(wa * target, S)
    return h, P


def side_conditional(m, state, prec, hyper, lay):
    """Natural parameters (h, P) of W_m given everything else (direct form)."""
    d = state.d
    P = hyper.Lambda_W.copy()
    h = hyper.Lambda_W @ hyper.mu_W
    if not state.use_side:
        return h, P
    Z = _side_sums(state, lay)
    for i in lay.raters(m):
        items, vals = lay.ratings.by_user(i)
        c = lay.inv_n[i]
        Vj = state.V[items]
        bj = prec.beta[items]
        base = state.use_user * state.U[i] + c * (Z[i] - state.W[m])
        e = vals - state.gamma[i] - state.eta[items] - Vj @ base
        P += prec.tau * prec.alpha[i] * c * c * (Vj.T * bj) @ Vj
        h += prec.tau * prec.alpha[i] * c * (Vj.T * bj) @ e
    return h, P


def bias_conditionals(state, prec, prior: PriorConfig, lay, S=None, which="user"):
    """(mean, precision) of every gamma_i (which='user') or eta_j (which='item')."""
    S = _effective(state, lay) if S is None else S
    w = prec.tau * prec.alpha[lay.users] * prec.beta[lay.items]
    dot = np.einsum("nd,nd->n", S[lay.users], state.V[lay.items])
    if which == "user":
        e = lay.values - state.eta[lay.items] - dot
        idx, size, mu0, lam0 = lay.users, len(state.gamma), prior.mu_gamma, prior.lambda_gamma
    else:
        e = lay.values - state.gamma[lay.users] - dot
        idx, size, mu0, lam0 = lay.items, len(state.eta), prior.mu_eta, prior.lambda_eta
    lam = lam0 + np.bincount(idx, w, minlength=size)
    mean = (lam0 * mu0 + np.bincount(idx, w * e, minlength=size)) / lam
    return mean, lam


def precision_conditionals(state, prec, prior: PriorConfig, lay, S=None, which="user"):
    """Gamma (shape, rate) for alpha (which='user'), beta ('item') or tau ('global')."""
    S = _effective(state, lay) if S is None else S
    e2 = (lay.values - _predict(state, lay, S)) ** 2
    if which == "user":
        shape = prior.a_user + 0.5 * lay.n
        rate = prior.b_user + 0.5 * prec.tau * np.bincount(
            lay.users, prec.beta[lay.items] * e2, minlength=len(lay.n))
    elif which == "item":
        shape = prior.a_item + 0.5 * lay.m
        rate = prior.b_item + 0.5 * prec.tau * np.bincount(
            lay.items, prec.alpha[lay.users] * e2, minlength=len(lay.m))
    else:
        shape = prior.a_tau + 0.5 * len(e2)
        rate = prior.b_tau + 0.5 * np.sum(prec.alpha[lay.users] * prec.beta[lay.items] * e2)
    return shape, rate


# ---------------------------------------------------------------- steps

def _draw_gaussians(h, P, rng, deterministic):
    mean, L = gaussian_from_precision(h, P)
    if deterministic:
        return mean
    return draw_with_factor(mean, L, rng)


def step_user_features(state, prec, hyper, lay, rng, deterministic=False):
    h, P = user_conditionals(state, prec, hyper, lay)
    state.U = _draw_gaussians(h, P, rng, deterministic)
    return state.U


def step_item_features(state, prec, hyper, lay, rng, deterministic=False, S=None):
    h, P = item_conditionals(state, prec, hyper, lay, S)
    state.V = _draw_gaussians(h, P, rng, deterministic)
    return state.V


def step_side_features(state, prec, hyper, lay, rng, deterministic=False):
    """Sequential scan over side vectors with incrementally maintained sums.

    For rater i of item m, with c_i = 1/n_i and A_i = sum_j beta_j V_j V_j^T,
    the conditional of W_m has precision Lambda_W + tau sum_i alpha_i c_i^2 A_i
    and linear term built from b_i = sum_j beta_j V_j (r - gamma - eta - U_i.V_j)
    and y_i = A_i Z_i, where Z_i is the running side sum of user i.
    """
    if not state.use_side:
        return state.W
    N, d = state.U.shape
    M = state.V.shape[0]
    Lam, mu = hyper.Lambda_W, hyper.mu_W
    c = lay.inv_n
    wb = prec.beta[lay.items]
    A = lay.user_sum(wb, outer_flat(state.V)).reshape(N, d, d)
    base = lay.values - state.gamma[lay.users] - state.eta[lay.items]
    if state.use_user:
        base = base - np.einsum("nd,nd->n", state.U[lay.users], state.V[lay.items])
    b = lay.user_sum(wb * base, state.V)
    coef = prec.tau * prec.alpha * c
    P_all = np.broadcast_to(Lam, (M, d, d)) + (
        lay.indicator_t @ ((coef * c)[:, None] * A.reshape(N, -1))).reshape(M, d, d)
    const = Lam @ mu + lay.indicator_t @ (coef[:, None] * b)
    Z = _side_sums(state, lay)
    y = np.einsum("nij,nj->ni", A, Z)
    noise = None if deterministic else rng.standard_normal((M, d))
    W = state.W
    ptr = lay.ratings.item_ptr
    for m in range(M):
        r = lay.users[lay.order[ptr[m]:ptr[m + 1]]]
        Pm = P_all[m]
        if len(r):
            wr = coef[r] * c[r]
            h = const[m] - wr @ y[r] + (Pm - Lam) @ W[m]
        else:
            h = const[m]
        L = cholesky_jitter(Pm)
        mean = np.linalg.solve(L.T, np.linalg.solve(L, h))
        new = mean if deterministic else mean + np.linalg.solve(L.T, noise[m])
        if len(r):
            delta = new - W[m]
            Z[r] += delta
            y[r] += A[r] @ delta
        W[m] = new
    return W


def step_biases(state, prec, prior, lay, rng, deterministic=False, which="both"):
    if which in ("both", "user"):
        mean, lam = bias_conditionals(state, prec, prior, lay, which="user")
        state.gamma = mean if deterministic else mean + rng.standard_normal(len(mean)) / np.sqrt(lam)
    if which in ("both", "item"):
        mean, lam = bias_conditionals(state, prec, prior, lay, which="item")
        state.eta = mean if deterministic else mean + rng.standard_normal(len(mean)) / np.sqrt(lam)
    return state.gamma, state.eta


def _gamma_draw(shape, rate, prec, rng, deterministic):
    if prec.mode == PrecisionMode.TRUNCATED:
        if deterministic:
            return truncated_gamma_point(shape, rate, prec.lo, prec.hi)
        return sample_truncated_gamma(shape, rate, prec.lo, prec.hi, rng)
    if deterministic:
        return shape / rate
    return rng.gamma(shape, 1.0 / rate)


def step_precisions(state, prec, prior, lay, rng, deterministic=False, which="all",
                    sample_tau=True):
    """Update alpha, beta (skipped in constant mode) and tau in that order."""
    if prec.mode != PrecisionMode.CONSTANT:
        if which in ("all", "user"):
            a, b = precision_conditionals(state, prec, prior, lay, which="user")
            prec.alpha = np.atleast_1d(_gamma_draw(a, b, prec, rng, deterministic))
        if which in ("all", "item"):
            a, b = precision_conditionals(state, prec, prior, lay, which="item")
            prec.beta = np.atleast_1d(_gamma_draw(a, b, prec, rng, deterministic))
    if sample_tau and which in ("all", "global"):
        a, b = precision_conditionals(state, prec, prior, lay, which="global")
        prec.tau = float(a / b if deterministic else rng.gamma(a, 1.0 / b))
    return prec


# ---------------------------------------------------------------- chain

@dataclass
class RunningPrediction:
    total: np.ndarray
    count: int = 0

    @property
    def mean(self):
        return self.total / max(self.count, 1)

    def add(self, pred):
        self.total += pred
        self.count += 1


@dataclass
class ChainResult:
    prediction: RunningPrediction
    train_prediction: RunningPrediction
    state: FeatureState
    precisions: PrecisionState
    hyper: HyperState
    trace: list = field(default_factory=list)
    user_mean: np.ndarray = None
    user_sq: np.ndarray = None

    @property
    def user_feature_variance(self):
        """Across-sample variance of every user feature coordinate."""
        k = self.prediction.count
        if k == 0:
            return None
        m = self.user_mean / k
        return np.maximum(self.user_sq / k - m * m, 0.0)

    def write_trace(self, path):
        if not self.trace:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.trace[0]))
            w.writeheader()
            w.writerows(self.trace)


def check_state(state, prec, hyper):
    state.validate()
    prec.validate()
    hyper.validate()


def sweep(state, prec, hyper, prior, lay, rng, cfg: GibbsConfig):
    """One full scan in the fixed order described in the module docstring."""
    det = cfg.deterministic
    has_features = bool(state.use_user or state.use_side)
    if cfg.sample_hyper and has_features:
        if state.use_user:
            hyper.mu_U, hyper.Lambda_U = step_hyperparams(state.U, prior, rng, det)
        hyper.mu_V, hyper.Lambda_V = step_hyperparams(state.V, prior, rng, det)
        if state.use_side:
            hyper.mu_W, hyper.Lambda_W = step_hyperparams(state.W, prior, rng, det)
    # users
    if state.use_user:
        step_user_features(state, prec, hyper, lay, rng, det)
    if cfg.sample_biases:
        step_biases(state, prec, prior, lay, rng, det, which="user")
    step_precisions(state, prec, prior, lay, rng, det, which="user")
    # items
    if has_features:
        step_item_features(state, prec, hyper, lay, rng, det)
    if cfg.sample_biases:
        step_biases(state, prec, prior, lay, rng, det, which="item")
    step_precisions(state, prec, prior, lay, rng, det, which="item")
    # side features, then global precision
    if state.use_side:
        step_side_features(state, prec, hyper, lay, rng, det)
    step_precisions(state, prec, prior, lay, rng, det, which="global",
                    sample_tau=cfg.sample_tau)


def _rmse(pred, truth):
    return float(np.sqrt(np.mean((pred - truth) ** 2))) if len(truth) else float("nan")


def run_chain(state: FeatureState, prec: PrecisionState, hyper: HyperState,
              prior: PriorConfig, train: SparseRatings, cfg: GibbsConfig,
              target: SparseRatings | None = None, callback=None) -> ChainResult:
    """Run ``burn_in + num_samples * thin`` sweeps and average predictions.

    Predictions for ``target`` use the training rating sets for the side term.
    The running average starts with the first retained sample.
    """
    if state.use_user != prior.use_user or state.use_side != prior.use_side:
        raise ValueError("feature flags of state and prior disagree")
    state, prec, hyper = state.copy(), prec.copy(), HyperState(**{
        k: np.array(v, float) for k, v in vars(hyper).items()})
    rng = make_rng(cfg.seed)
    lay = Layout(train)
    target = SparseRatings.empty(train.num_users, train.num_items) if target is None else target
    run = RunningPrediction(np.zeros(len(target)))
    run_train = RunningPrediction(np.zeros(len(train)))
    user_mean = np.zeros_like(state.U)
    user_sq = np.zeros_like(state.U)
    trace = []
    k = min(cfg.trace_entities, len(prec.alpha), len(prec.beta))
    start = time.perf_counter()
    total = cfg.burn_in + cfg.num_samples * cfg.thin
    for it in range(1, total + 1):
        sweep(state, prec, hyper, prior, lay, rng, cfg)
        if cfg.check_invariants:
            check_state(state, prec, hyper)
        if it <= cfg.burn_in or (it - cfg.burn_in) % cfg.thin:
            continue
        S = _effective(state, lay)
        pred_train = _predict(state, lay, S)
        run_train.add(pred_train)
        if len(target):
            run.add(state.gamma[target.users] + state.eta[target.items]
                    + np.einsum("nd,nd->n", S[target.users], state.V[target.items]))
        else:
            run.count += 1
        user_mean += state.U
        user_sq += state.U ** 2
        row = {"iter": it,
               "rmse_train": _rmse(pred_train, train.values),
               "rmse_test": _rmse(run.mean, target.values),
               "tau": prec.tau}
        for q in range(k):
            row[f"alpha_{q}"] = float(prec.alpha[q])
        for q in range(k):
            row[f"beta_{q}"] = float(prec.beta[q])
        row["elapsed_ms"] = round(1000 * (time.perf_counter() - start), 3)
        trace.append(row)
        if callback is not None:
            callback(it, state, prec, hyper, row)
    return ChainResult(run, run_train, state, prec, hyper, trace, user_mean, user_sq)
