"""Staged MAP learning: biases, then features, then precision estimates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import (FeatureState, PrecisionMode, PrecisionState, SparseRatings,
                    effective_user, predict_entries, residuals)
from .stochastic import make_rng

log = logging.getLogger(__name__)

PRECISION_CAP = 1e8


class OptimizerError(RuntimeError):
    pass


@dataclass
class MapConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    tau_fixed: float = 1.0
    lambda_bias: float = 0.02
    lambda_feature: float = 0.02
    max_epochs: int = 500
    patience: int = 3
    init_std: float = 0.01
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.tau_fixed <= 0:
            raise ValueError("learning_rate and tau_fixed must be positive")
        if self.lambda_bias <= 0 or self.lambda_feature <= 0:
            raise ValueError("penalties must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class GradientState:
    dU: np.ndarray
    dV: np.ndarray
    dW: np.ndarray
    dgamma: np.ndarray
    deta: np.ndarray


@dataclass
class FitHistory:
    energy: list = field(default_factory=list)
    train_rmse: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    best_epoch: int = 0
    learning_rate: float = 0.0


def _weights(prec: PrecisionState, ratings: SparseRatings):
    return prec.tau * prec.alpha[ratings.users] * prec.beta[ratings.items]


def energy(params: FeatureState, prec: PrecisionState, ratings: SparseRatings,
           cfg: MapConfig) -> float:
    """Weighted squared error plus quadratic penalties."""
    e = residuals(params, ratings)
    fit = 0.5 * np.sum(_weights(prec, ratings) * e * e)
    pen_b = 0.5 * cfg.lambda_bias * (params.gamma @ params.gamma + params.eta @ params.eta)
    pen_f = 0.5 * cfg.lambda_feature * (np.sum(params.U ** 2) + np.sum(params.V ** 2)
                                        + np.sum(params.W ** 2))
    return float(fit + pen_b + pen_f)


def gradient(params: FeatureState, prec: PrecisionState, ratings: SparseRatings,
             cfg: MapConfig) -> GradientState:
    """Analytic gradient of ``energy`` with respect to every parameter block."""
    S = effective_user(params, ratings)
    e = ratings.values - predict_entries(params, ratings, ratings.users,
                                         ratings.items, S)
    we = _weights(prec, ratings) * e
    lb, lf = cfg.lambda_bias, cfg.lambda_feature
    dgamma = -np.bincount(ratings.users, we, minlength=ratings.num_users) + lb * params.gamma
    deta = -np.bincount(ratings.items, we, minlength=ratings.num_items) + lb * params.eta
    g = ratings.user_matrix(we) @ params.V
    dV = -(ratings.item_matrix(we) @ S) + lf * params.V
    dU = -params.use_user * g + lf * params.U
    dW = lf * params.W
    if params.use_side:
        n = ratings.user_counts
        inv = np.divide(1.0, n, out=np.zeros(len(n)), where=n > 0)
        dW = dW - ratings.item_matrix(np.ones(len(ratings))) @ (g * inv[:, None])
    return GradientState(dU, dV, dW, dgamma, deta)


def rmse_of(params, train, target):
    if target is None or len(target) == 0:
        return np.nan
    e = residuals(params, target, train=train)
    return float(np.sqrt(np.mean(e * e)))


def _descend(params, blocks, prec, ratings, validation, cfg, history):
    """Heavy-ball descent over the named parameter blocks.

    A step that raises the energy is undone, the step size is halved and the
    velocity is reset, so accepted iterates never increase the energy.  Stops
    when the validation RMSE has not improved for ``patience`` epochs or the
    relative energy change drops below ``tol``; returns the best-validation
    iterate (or the last one without a validation set).
    """
    lr = cfg.learning_rate
    vel = {b: np.zeros_like(getattr(params, b)) for b in blocks}
    E = energy(params, prec, ratings, cfg)
    history.energy.append(E)
    use_val = validation is not None and len(validation) > 0
    best = params.copy()
    best_val = rmse_of(params, ratings, validation) if use_val else np.inf
    history.val_rmse.append(best_val)
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        grad = gradient(params, prec, ratings, cfg)
        while True:
            trial = params.copy()
            new_vel = {}
            for b in blocks:
                v = cfg.momentum * vel[b] - lr * getattr(grad, "d" + b)
                new_vel[b] = v
                setattr(trial, b, getattr(trial, b) + v)
            E_new = energy(trial, prec, ratings, cfg)
            if not np.isfinite(E_new) and lr < 1e-300:
                raise OptimizerError(f"energy became non-finite at epoch {epoch}")
            if np.isfinite(E_new) and E_new <= E:
                break
            lr *= 0.5
            vel = {b: np.zeros_like(vel[b]) for b in blocks}
            if lr < 1e-20:
                raise OptimizerError(f"step size underflow at epoch {epoch}")
        params, vel = trial, new_vel
        rel = (E - E_new) / max(abs(E), 1e-300)
        E = E_new
        history.energy.append(E)
        val = rmse_of(params, ratings, validation) if use_val else np.nan
        history.val_rmse.append(val)
        if use_val:
            if val < best_val:
                best_val, best, stall = val, params.copy(), 0
                history.best_epoch = epoch
            else:
                stall += 1
                if stall >= cfg.patience:
                    break
        if rel < cfg.tol:
            break
    history.learning_rate = lr
    if not use_val:
        best = params
        history.best_epoch = len(history.energy) - 1
    return best


def _unit_precisions(ratings, cfg):
    return PrecisionState.ones(ratings.num_users, ratings.num_items, cfg.tau_fixed)


def fit_biases(ratings: SparseRatings, validation: SparseRatings | None,
               cfg: MapConfig, prec: PrecisionState | None = None, d: int = 1):
    """Bias-only stage with features held at zero.  Returns (gamma, eta, history)."""
    prec = _unit_precisions(ratings, cfg) if prec is None else prec
    params = FeatureState.zeros(ratings.num_users, ratings.num_items, d, 0, 0)
    history = FitHistory()
    if len(ratings) == 0:
        return params.gamma, params.eta, history
    best = _descend(params, ("gamma", "eta"), prec, ratings, validation, cfg, history)
    return best.gamma, best.eta, history


def fit_features(ratings: SparseRatings, validation: SparseRatings | None, biases,
                 cfg: MapConfig, d: int = 20, use_user: int = 1, use_side: int = 0,
                 prec: PrecisionState | None = None, init: FeatureState | None = None):
    """Feature stage with biases fixed.  Returns (FeatureState, history)."""
    prec = _unit_precisions(ratings, cfg) if prec is None else prec
    gamma, eta = biases
    if init is not None:
        params = init.copy()
    else:
        rng = make_rng(cfg.seed)
        N, M = ratings.num_users, ratings.num_items
        params = FeatureState.zeros(N, M, d, use_user, use_side)
        if use_user or use_side:
            params.V = cfg.init_std * rng.standard_normal((M, d))
        if use_user:
            params.U = cfg.init_std * rng.standard_normal((N, d))
        if use_side:
            params.W = cfg.init_std * rng.standard_normal((M, d))
    params.gamma = np.array(gamma, float)
    params.eta = np.array(eta, float)
    history = FitHistory()
    if not (params.use_user or params.use_side):
        params.V[:] = 0.0
        return params, history
    blocks = ["V"] + (["U"] if params.use_user else []) + (["W"] if params.use_side else [])
    best = _descend(params, tuple(blocks), prec, ratings, validation, cfg, history)
    return best, history


def fit_precisions_mle(params: FeatureState, ratings: SparseRatings,
                       mode=PrecisionMode.ROBUST, lo=0.0, hi=np.inf,
                       max_sweeps=500, tol=1e-8) -> PrecisionState:
    """Coupled fixed point for the global precision and per-user/per-item factors.

    Each sweep sets tau = |R| / sum(alpha beta e^2), then
    alpha_i = n_i / (tau sum_j beta_j e^2) and beta_j = m_j / (tau sum_i alpha_i e^2).
    Entities without observations keep factor 1.
    """
    mode = PrecisionMode(mode)
    N, M = ratings.num_users, ratings.num_items
    cap = min(PRECISION_CAP, hi) if mode == PrecisionMode.TRUNCATED else PRECISION_CAP
    e2 = residuals(params, ratings) ** 2
    u, it = ratings.users, ratings.items
    n, m = ratings.user_counts, ratings.item_counts
    alpha, beta = np.ones(N), np.ones(M)
    tau = 1.0

    def clamp(x):
        if mode == PrecisionMode.TRUNCATED:
            return np.clip(x, lo, hi)
        return x

    def factor(count, denom):
        out = np.ones(len(count))
        has = count > 0
        with np.errstate(divide="ignore"):
            val = np.where(denom[has] > 0, count[has] / np.where(denom[has] > 0, denom[has], 1), np.inf)
        out[has] = np.minimum(val, cap)
        return clamp(out)

    if mode == PrecisionMode.TRUNCATED:
        alpha, beta = clamp(alpha), clamp(beta)
    for _ in range(max_sweeps):
        old = np.concatenate([[tau], alpha, beta])
        total = np.sum(alpha[u] * beta[it] * e2)
        tau = min(len(e2) / total, PRECISION_CAP) if total > 0 else PRECISION_CAP
        if mode != PrecisionMode.CONSTANT:
            alpha = factor(n, tau * np.bincount(u, beta[it] * e2, minlength=N))
            beta = factor(m, tau * np.bincount(it, alpha[u] * e2, minlength=M))
        new = np.concatenate([[tau], alpha, beta])
        if np.max(np.abs(new - old) / np.abs(old)) < tol:
            break
    return PrecisionState(alpha, beta, float(tau), mode,
                          float(lo) if mode == PrecisionMode.TRUNCATED else 0.0,
                          float(hi) if mode == PrecisionMode.TRUNCATED else np.inf)


def map_driven_scale_matrix(features: FeatureState) -> np.ndarray:
    """Diagonal Wishart scale whose inverse is half the diagonal second moment of
    the user plus item features (side features replace user ones when the
    user block is switched off)."""
    first = features.U if features.use_user else features.W
    inv_diag = 0.5 * np.sum(first ** 2, axis=0) + 0.5 * np.sum(features.V ** 2, axis=0)
    if np.any(inv_diag <= 0):
        raise ValueError("degenerate feature dimension: zero second moment")
    return np.diag(1.0 / inv_diag)


@dataclass
class MapResult:
    features: FeatureState
    precisions: PrecisionState
    bias_history: FitHistory
    feature_history: FitHistory


def fit_map(train: SparseRatings, validation: SparseRatings | None, cfg: MapConfig,
            d: int = 20, use_user: int = 1, use_side: int = 0,
            mode=PrecisionMode.CONSTANT, lo=0.0, hi=np.inf) -> MapResult:
    """Run all three stages.  The precision stage does not touch the predictions."""
    gamma, eta, h_b = fit_biases(train, validation, cfg)
    log.info("bias stage: %d epochs, val rmse %.4f", len(h_b.energy) - 1,
             np.nanmin(h_b.val_rmse) if h_b.val_rmse else np.nan)
    feats, h_f = fit_features(train, validation, (gamma, eta), cfg, d, use_user, use_side)
    if h_f.val_rmse:
        log.info("feature stage: %d epochs, best val rmse %.4f", len(h_f.energy) - 1,
                 np.nanmin(h_f.val_rmse))
    prec = fit_precisions_mle(feats, train, mode, lo, hi)
    if PrecisionMode(mode) == PrecisionMode.CONSTANT:
        prec.alpha[:] = 1.0
        prec.beta[:] = 1.0
    return MapResult(feats, prec, h_b, h_f)
