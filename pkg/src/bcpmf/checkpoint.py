"""Versioned binary checkpoints for features, precisions and optional extras."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import FeatureState, HyperState, PrecisionMode, PrecisionState

FORMAT_VERSION = 1
MAGIC = "bcpmf-checkpoint"


class CheckpointError(OSError):
    """The file is missing, unreadable or not a compatible checkpoint."""


@dataclass
class Checkpoint:
    features: FeatureState
    precisions: PrecisionState
    hyper: HyperState | None = None
    extras: dict = field(default_factory=dict)
    backend: str = "map"


def save_checkpoint(path, ckpt: Checkpoint):
    f, p = ckpt.features, ckpt.precisions
    N, d = f.U.shape
    M = f.V.shape[0]
    arrays = {
        "magic": np.array(MAGIC),
        "version": np.array(FORMAT_VERSION),
        "header": np.array([N, M, d, f.use_user, f.use_side], dtype=np.int64),
        "backend": np.array(ckpt.backend),
        "U": f.U, "V": f.V, "W": f.W, "gamma": f.gamma, "eta": f.eta,
        "alpha": p.alpha, "beta": p.beta,
        "tau": np.array(p.tau), "mode": np.array(p.mode.value),
        "bounds": np.array([p.lo, p.hi]),
    }
    if ckpt.hyper is not None:
        for k, v in vars(ckpt.hyper).items():
            arrays["hyper_" + k] = v
    for k, v in ckpt.extras.items():
        arrays["extra_" + k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    with z:
        if not hasattr(z, "files") or "magic" not in z.files or str(z["magic"]) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version = int(z["version"])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        N, M, d, use_user, use_side = (int(v) for v in z["header"])
        f = FeatureState(z["U"].copy(), z["V"].copy(), z["W"].copy(), z["gamma"].copy(),
                         z["eta"].copy(), use_user, use_side)
        if f.U.shape != (N, d) or f.V.shape != (M, d):
            raise CheckpointError("checkpoint header does not match array shapes")
        lo, hi = (float(v) for v in z["bounds"])
        p = PrecisionState(z["alpha"].copy(), z["beta"].copy(), float(z["tau"]),
                           PrecisionMode(str(z["mode"])), lo, hi)
        hyper = None
        if "hyper_mu_U" in z:
            hyper = HyperState(**{k[6:]: z[k].copy() for k in z.files if k.startswith("hyper_")})
        extras = {k[6:]: z[k].copy() for k in z.files if k.startswith("extra_")}
        return Checkpoint(f, p, hyper, extras, str(z["backend"]))
