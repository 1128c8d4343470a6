"""Model state for constrained matrix factorization with biases and side features.

Ratings are kept in a sparse container with both a user-major and an
item-major view.  The effective user vector combines a free user feature with
the average side feature over the items the user rated:

    S_i = use_user * U_i + (use_side / n_i) * sum_{k rated by i} W_k

and a rating is predicted as ``gamma_i + eta_j + S_i . V_j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, eq=False)
class SparseRatings:
    """Immutable rating matrix with user-major and item-major indexes.

    ``users``, ``items`` and ``values`` are sorted by (user, item).  The
    item-major view is a permutation ``item_order`` of the entries together
    with ``item_ptr`` offsets, so ``items[item_order[item_ptr[j]:item_ptr[j+1]]]``
    are all equal to ``j``.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    user_ptr: np.ndarray
    item_order: np.ndarray
    item_ptr: np.ndarray
    scale: tuple = (1.0, 5.0)

    @classmethod
    def from_triplets(cls, users, items, values, num_users=None, num_items=None,
                      scale=(1.0, 5.0), check_scale=True):
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if not (len(users) == len(items) == len(values)):
            raise ValueError("users, items and values must have equal length")
        if num_users is None:
            num_users = int(users.max()) + 1 if len(users) else 0
        if num_items is None:
            num_items = int(items.max()) + 1 if len(items) else 0
        if len(users):
            if users.min() < 0 or users.max() >= num_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= num_items:
                raise ValueError("item index out of range")
        if check_scale and len(values):
            lo, hi = scale
            if values.min() < lo or values.max() > hi:
                raise ValueError(f"ratings must lie in [{lo}, {hi}]")

        order = np.lexsort((items, users))
        users, items, values = users[order], items[order], values[order]
        if len(users) > 1:
            dup = (users[1:] == users[:-1]) & (items[1:] == items[:-1])
            if dup.any():
                raise ValueError("duplicate (user, item) pair")

        user_ptr = np.zeros(num_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(users, minlength=num_users), out=user_ptr[1:])
        item_order = np.lexsort((users, items))
        item_ptr = np.zeros(num_items + 1, dtype=np.int64)
        np.cumsum(np.bincount(items, minlength=num_items), out=item_ptr[1:])
        for arr in (users, items, values, user_ptr, item_order, item_ptr):
            arr.setflags(write=False)
        return cls(int(num_users), int(num_items), users, items, values,
                   user_ptr, item_order, item_ptr, tuple(float(s) for s in scale))

    @classmethod
    def empty(cls, num_users=0, num_items=0, scale=(1.0, 5.0)):
        return cls.from_triplets([], [], [], num_users, num_items, scale)

    def __len__(self):
        return len(self.values)

    @property
    def user_counts(self):
        """Number of ratings per user (n_i)."""
        return np.diff(self.user_ptr)

    @property
    def item_counts(self):
        """Number of ratings per item (m_j)."""
        return np.diff(self.item_ptr)

    def by_user(self, i):
        sl = slice(self.user_ptr[i], self.user_ptr[i + 1])
        return self.items[sl], self.values[sl]

    def by_item(self, j):
        idx = self.item_order[self.item_ptr[j]:self.item_ptr[j + 1]]
        return self.users[idx], self.values[idx]

    def entry_set(self):
        return set(zip(self.users.tolist(), self.items.tolist(), self.values.tolist()))

    def user_matrix(self, weights=None):
        """N x M CSR matrix holding ``weights`` (default: ratings) at observed cells."""
        data = self.values if weights is None else np.asarray(weights, dtype=float)
        return sp.csr_matrix((data, self.items, self.user_ptr),
                             shape=(self.num_users, self.num_items))

    def item_matrix(self, weights=None):
        """M x N CSR matrix holding entry-aligned ``weights`` at observed cells."""
        data = self.values if weights is None else np.asarray(weights, dtype=float)
        return sp.csr_matrix((data[self.item_order], self.users[self.item_order],
                              self.item_ptr), shape=(self.num_items, self.num_users))

    def indicator(self):
        return self.user_matrix(np.ones(len(self)))

    def subset(self, mask):
        """Entries selected by a boolean mask, keeping the index space."""
        mask = np.asarray(mask, dtype=bool)
        return SparseRatings.from_triplets(self.users[mask], self.items[mask],
                                           self.values[mask], self.num_users,
                                           self.num_items, self.scale)

    def with_values(self, values):
        return SparseRatings.from_triplets(self.users, self.items, values,
                                           self.num_users, self.num_items,
                                           self.scale, check_scale=False)


def transpose(ratings: SparseRatings) -> SparseRatings:
    """Swap the roles of users and items."""
    return SparseRatings.from_triplets(ratings.items, ratings.users, ratings.values,
                                       ratings.num_items, ratings.num_users,
                                       ratings.scale)


@dataclass
class FeatureState:
    """Latent features and biases.  Rows of U, V, W are per-entity vectors."""

    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    use_user: int = 1
    use_side: int = 0

    @property
    def d(self):
        return self.V.shape[1]

    @classmethod
    def zeros(cls, num_users, num_items, d, use_user=1, use_side=0):
        return cls(np.zeros((num_users, d)), np.zeros((num_items, d)),
                   np.zeros((num_items, d)), np.zeros(num_users),
                   np.zeros(num_items), int(use_user), int(use_side))

    def copy(self):
        return FeatureState(self.U.copy(), self.V.copy(), self.W.copy(),
                            self.gamma.copy(), self.eta.copy(),
                            self.use_user, self.use_side)

    def validate(self):
        for name in ("U", "V", "W", "gamma", "eta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")
        if not self.use_user and np.any(self.U):
            raise ValueError("U must be zero when user features are disabled")
        if not self.use_side and np.any(self.W):
            raise ValueError("W must be zero when side features are disabled")


class PrecisionMode(str, Enum):
    CONSTANT = "constant"
    ROBUST = "robust"
    TRUNCATED = "truncated"


@dataclass
class PrecisionState:
    alpha: np.ndarray
    beta: np.ndarray
    tau: float = 1.0
    mode: PrecisionMode = PrecisionMode.CONSTANT
    lo: float = 0.0
    hi: float = np.inf

    @classmethod
    def ones(cls, num_users, num_items, tau=1.0, mode=PrecisionMode.CONSTANT,
             lo=0.0, hi=np.inf):
        return cls(np.ones(num_users), np.ones(num_items), float(tau),
                   PrecisionMode(mode), float(lo), float(hi))

    def copy(self):
        return replace(self, alpha=self.alpha.copy(), beta=self.beta.copy())

    def validate(self):
        if self.tau <= 0 or np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ValueError("precisions must be strictly positive")
        if self.mode == PrecisionMode.CONSTANT:
            if np.any(self.alpha != 1) or np.any(self.beta != 1):
                raise ValueError("constant mode requires unit alpha and beta")
        elif self.mode == PrecisionMode.TRUNCATED:
            if not self.lo < self.hi:
                raise ValueError("truncation bounds must satisfy lo < hi")
            for v in (self.alpha, self.beta):
                if np.any(v < self.lo) or np.any(v > self.hi):
                    raise ValueError("precision outside truncation bounds")


@dataclass
class HyperState:
    """Normal-Wishart draws (mean, precision) for the U, V and W families."""

    mu_U: np.ndarray
    Lambda_U: np.ndarray
    mu_V: np.ndarray
    Lambda_V: np.ndarray
    mu_W: np.ndarray
    Lambda_W: np.ndarray

    @classmethod
    def from_prior(cls, d, mean=None, precision=None):
        mean = np.zeros(d) if mean is None else np.asarray(mean, float)
        precision = np.eye(d) if precision is None else np.asarray(precision, float)
        return cls(mean.copy(), precision.copy(), mean.copy(), precision.copy(),
                   mean.copy(), precision.copy())

    def family(self, name):
        return getattr(self, "mu_" + name), getattr(self, "Lambda_" + name)

    def set_family(self, name, mu, Lam):
        setattr(self, "mu_" + name, mu)
        setattr(self, "Lambda_" + name, Lam)

    def validate(self):
        for name in "UVW":
            Lam = getattr(self, "Lambda_" + name)
            if np.max(np.abs(Lam - Lam.T)) > 1e-10 * max(1.0, np.max(np.abs(Lam))):
                raise ValueError(f"Lambda_{name} is not symmetric")
            np.linalg.cholesky(Lam)


@dataclass(frozen=True)
class PriorConfig:
    """Fixed prior constants and model flags."""

    d: int = 20
    mu0: np.ndarray = None
    beta0: float = 1.0
    nu0: float = None
    W0: np.ndarray = None
    a_user: float = 2.0
    b_user: float = 2.0
    a_item: float = 2.0
    b_item: float = 2.0
    a_tau: float = 2.0
    b_tau: float = 2.0
    mu_gamma: float = 0.0
    lambda_gamma: float = 1.0
    mu_eta: float = 0.0
    lambda_eta: float = 1.0
    use_user: int = 1
    use_side: int = 0
    scale: tuple = (1.0, 5.0)
    # Extra Wishart degrees of freedom in the Gibbs hyper-parameter draw,
    # coming from the |Lambda|^(1/2) factor of the mean's Gaussian.
    hyper_dof_offset: float = 1.0

    def __post_init__(self):
        d = self.d
        if self.mu0 is None:
            object.__setattr__(self, "mu0", np.zeros(d))
        if self.W0 is None:
            object.__setattr__(self, "W0", np.eye(d))
        if self.nu0 is None:
            object.__setattr__(self, "nu0", float(d + 1))
        object.__setattr__(self, "mu0", np.asarray(self.mu0, float))
        object.__setattr__(self, "W0", np.asarray(self.W0, float))
        self.validate()

    def validate(self):
        d = self.d
        if self.mu0.shape != (d,) or self.W0.shape != (d, d):
            raise ValueError("mu0 / W0 shapes do not match d")
        if self.nu0 < d:
            raise ValueError("nu0 must be >= d")
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        for name in ("a_user", "b_user", "a_item", "b_item", "a_tau", "b_tau",
                     "lambda_gamma", "lambda_eta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.use_user not in (0, 1) or self.use_side not in (0, 1):
            raise ValueError("model flags must be 0 or 1")
        np.linalg.cholesky(self.W0)

    @property
    def W0_inv(self):
        return np.linalg.inv(self.W0)

    def with_(self, **kw):
        return replace(self, **kw)


def side_sums(state: FeatureState, ratings: SparseRatings) -> np.ndarray:
    """Per-user sum of side features over rated items (N x d)."""
    return ratings.indicator() @ state.W


def effective_user(state: FeatureState, ratings: SparseRatings, sums=None) -> np.ndarray:
    """All S_i stacked as an N x d matrix.  Users without ratings get ``use_user * U_i``."""
    S = state.use_user * state.U
    if state.use_side:
        if sums is None:
            sums = side_sums(state, ratings)
        n = ratings.user_counts
        inv = np.divide(1.0, n, out=np.zeros(len(n)), where=n > 0)
        S = S + sums * inv[:, None]
    return S


def side_contribution(i: int, state: FeatureState, ratings: SparseRatings) -> np.ndarray:
    """S_i for one user."""
    S = state.use_user * state.U[i]
    if state.use_side:
        items, _ = ratings.by_user(i)
        if len(items):
            S = S + state.W[items].sum(axis=0) / len(items)
    return np.asarray(S, dtype=float)


def predict(i: int, j: int, state: FeatureState, ratings: SparseRatings) -> float:
    """Unclamped prediction for (user i, item j); ``ratings`` supplies the rated-item sets."""
    S = side_contribution(i, state, ratings)
    return float(state.gamma[i] + state.eta[j] + S @ state.V[j])


def predict_entries(state: FeatureState, train: SparseRatings, users, items,
                    S=None) -> np.ndarray:
    """Vectorized predictions for arbitrary (user, item) pairs.

    ``train`` defines the rated-item sets used for the side term, so predictions
    for held-out pairs rely only on training indicators.
    """
    if S is None:
        S = effective_user(state, train)
    users = np.asarray(users)
    items = np.asarray(items)
    return state.gamma[users] + state.eta[items] + np.einsum(
        "nd,nd->n", S[users], state.V[items])


def residuals(state: FeatureState, ratings: SparseRatings, S=None, train=None):
    train = ratings if train is None else train
    return ratings.values - predict_entries(state, train, ratings.users,
                                            ratings.items, S)


def swap_roles(state: FeatureState) -> FeatureState:
    """Role-swapped parameters matching ``transpose`` for models without side features."""
    if state.use_side:
        raise ValueError("role swap is only defined without side features")
    return FeatureState(state.V.copy(), state.U.copy(), np.zeros_like(state.U),
                        state.eta.copy(), state.gamma.copy(), 1, 0)
