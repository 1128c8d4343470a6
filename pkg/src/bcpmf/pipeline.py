"""End-to-end experiment steps shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging
import time
from pathlib import Path
from dataclasses import dataclass, replace

import numpy as np

from . import gibbs, vi
from .config import ExperimentConfig
from .data import (filter_items, parse_ratings, read_id_map, read_manifest, split,
                   write_id_map, write_manifest)
from .map_estimator import MapResult, fit_map, map_driven_scale_matrix
from .model import HyperState, PrecisionMode, PrecisionState, PriorConfig, SparseRatings

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    train: SparseRatings
    validation: SparseRatings
    test: SparseRatings
    user_ids: np.ndarray
    item_ids: np.ndarray

    @property
    def train_full(self) -> SparseRatings:
        """Training plus validation entries; the sampling and variational back-ends
        have no early stopping, so they use both."""
        t, v = self.train, self.validation
        if len(v) == 0:
            return t
        return SparseRatings.from_triplets(
            np.r_[t.users, v.users], np.r_[t.items, v.items], np.r_[t.values, v.values],
            t.num_users, t.num_items, scale=t.scale, check_scale=False)


def load_dataset(cfg: ExperimentConfig, path=None) -> Dataset:
    parsed = parse_ratings(path or cfg.data.path, cfg.data.format,
                           (cfg.data.scale_lo, cfg.data.scale_hi))
    ratings = parsed.ratings
    if cfg.split.min_item_ratings:
        ratings = filter_items(ratings, cfg.split.min_item_ratings)
    train, validation, test = split(ratings, cfg.split_spec())
    log.info("split: %d train, %d validation, %d test", len(train), len(validation), len(test))
    return Dataset(train, validation, test, parsed.user_ids, parsed.item_ids)


FOLDS = ("train", "validation", "test")


def write_prepared(data: Dataset, out_dir) -> list:
    """One ``user,item,rating,fold`` CSV per fold plus user and item id maps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in FOLDS:
        p = out_dir / f"{name}.csv"
        write_manifest(p, {name: getattr(data, name)}, data.user_ids, data.item_ids)
        paths.append(p)
    for name, ids in (("users", data.user_ids), ("items", data.item_ids)):
        p = out_dir / f"{name}.csv"
        write_id_map(p, ids)
        paths.append(p)
    return paths


def load_prepared(split_dir, scale=(1.0, 5.0)) -> Dataset:
    split_dir = Path(split_dir)
    user_ids = read_id_map(split_dir / "users.csv")
    item_ids = read_id_map(split_dir / "items.csv")
    N, M = len(user_ids), len(item_ids)
    folds = {}
    for name in FOLDS:
        part = read_manifest(split_dir / f"{name}.csv", N, M, user_ids, item_ids, scale)
        folds[name] = part.get(name, SparseRatings.empty(N, M, scale))
    return Dataset(folds["train"], folds["validation"], folds["test"], user_ids, item_ids)


def precision_mode(cfg: ExperimentConfig):
    mode = PrecisionMode(cfg.model.precision)
    if mode == PrecisionMode.TRUNCATED:
        return mode, cfg.model.lo, cfg.model.hi
    return mode, 0.0, np.inf


def build_prior(cfg: ExperimentConfig, train: SparseRatings, map_result: MapResult | None = None
                ) -> PriorConfig:
    d = cfg.model.d
    p = cfg.prior
    if p.map_driven_w0:
        if map_result is None:
            raise ValueError("a data-driven scale matrix needs a point estimate")
        W0 = map_driven_scale_matrix(map_result.features)
    else:
        W0 = p.w0_scale * np.eye(d)
    mu_eta = float(np.mean(train.values)) if p.mu_eta == "mean" else float(p.mu_eta)
    return PriorConfig(d=d, beta0=p.beta0, nu0=p.nu0 if p.nu0 >= 0 else None, W0=W0,
                       a_user=p.a_user, b_user=p.b_user, a_item=p.a_item, b_item=p.b_item,
                       a_tau=p.a_tau, b_tau=p.b_tau, mu_gamma=p.mu_gamma,
                       lambda_gamma=p.lambda_gamma, mu_eta=mu_eta, lambda_eta=p.lambda_eta,
                       use_user=cfg.model.use_user, use_side=cfg.model.use_side,
                       scale=(cfg.data.scale_lo, cfg.data.scale_hi),
                       hyper_dof_offset=p.hyper_dof_offset)


def run_map(cfg: ExperimentConfig, data: Dataset) -> MapResult:
    mode, lo, hi = precision_mode(cfg)
    mcfg = replace(cfg.map, seed=cfg.seed)
    t0 = time.perf_counter()
    res = fit_map(data.train, data.validation, mcfg, cfg.model.d, cfg.model.use_user,
                  cfg.model.use_side, mode, lo, hi)
    log.info("point estimate finished in %.1f s", time.perf_counter() - t0)
    return res


def run_gibbs(cfg: ExperimentConfig, data: Dataset, init: MapResult, callback=None
              ) -> gibbs.ChainResult:
    prior = build_prior(cfg, data.train, init)
    prec = init.precisions.copy()
    mode, lo, hi = precision_mode(cfg)
    if prec.mode != mode:
        prec = PrecisionState.ones(len(prec.alpha), len(prec.beta), prec.tau, mode, lo, hi)
    hyper = HyperState.from_prior(cfg.model.d)
    gcfg = replace(cfg.gibbs, seed=cfg.seed, threads=cfg.threads)
    return gibbs.run_chain(init.features, prec, hyper, prior, data.train_full, gcfg,
                           data.test, callback)


def run_vi(cfg: ExperimentConfig, data: Dataset, init: MapResult, callback=None) -> vi.ViResult:
    prior = build_prior(cfg, data.train, init)
    vs = vi.init_state(init.features, init.precisions, prior)
    return vi.run_vi(vs, prior, data.train_full, cfg.vi, data.test, callback)
