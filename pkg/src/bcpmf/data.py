"""Rating-file parsing, constrained train/validation/test splits, frequency bins."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import SparseRatings

log = logging.getLogger(__name__)

FORMATS = ("movielens_dat", "tsv_triplets")


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class ParsedRatings:
    ratings: SparseRatings
    user_ids: list
    item_ids: list
    duplicates: int = 0


def _split_line(line, fmt):
    if fmt == "movielens_dat":
        parts = line.split("::")
    else:
        parts = line.split("\t")
    return parts


def parse_ratings(path, fmt="movielens_dat", scale=(1.0, 5.0)) -> ParsedRatings:
    """Read a rating file into zero-based contiguous indices.

    ``movielens_dat`` lines are ``user::item::rating::timestamp``; ``tsv_triplets``
    lines are ``user<TAB>item<TAB>rating`` (extra columns are ignored).  For a
    repeated (user, item) pair the last occurrence wins.
    """
    if fmt not in FORMATS:
        raise ConfigError(f"unknown rating format {fmt!r}; expected one of {FORMATS}")
    lo, hi = scale
    user_index, item_index = {}, {}
    cells = {}
    n_rows = 0
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = _split_line(line, fmt)
            if len(parts) < 3 or (fmt == "movielens_dat" and len(parts) != 4):
                raise ParseError(f"{path}:{lineno}: malformed line {line!r}")
            uid, iid = parts[0].strip(), parts[1].strip()
            try:
                r = float(parts[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad rating {parts[2]!r}") from None
            if not lo <= r <= hi:
                raise ValueError(f"{path}:{lineno}: rating {r} outside [{lo}, {hi}]")
            i = user_index.setdefault(uid, len(user_index))
            j = item_index.setdefault(iid, len(item_index))
            cells[(i, j)] = r
            n_rows += 1
    duplicates = n_rows - len(cells)
    if duplicates:
        log.warning("%d duplicate (user, item) rows; kept the last occurrence", duplicates)
    if cells:
        keys = np.array(list(cells.keys()), dtype=np.int64)
        vals = np.fromiter(cells.values(), dtype=float, count=len(cells))
    else:
        keys = np.zeros((0, 2), dtype=np.int64)
        vals = np.zeros(0)
    ratings = SparseRatings.from_triplets(keys[:, 0], keys[:, 1], vals,
                                          len(user_index), len(item_index), scale)
    return ParsedRatings(ratings, list(user_index), list(item_index), duplicates)


def write_triplets(ratings: SparseRatings, path, user_ids=None, item_ids=None):
    """Write entries in ``tsv_triplets`` layout using external ids when given."""
    uid = user_ids if user_ids is not None else range(ratings.num_users)
    iid = item_ids if item_ids is not None else range(ratings.num_items)
    uid, iid = list(uid), list(iid)
    with open(path, "w") as fh:
        for i, j, r in zip(ratings.users, ratings.items, ratings.values):
            fh.write(f"{uid[i]}\t{iid[j]}\t{r:g}\n")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    validation_fraction: float = 0.05
    seed: int = 0
    min_item_ratings: int = 0
    require_coverage: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")


def filter_items(ratings: SparseRatings, min_item_ratings: int) -> SparseRatings:
    """Drop items with fewer than ``min_item_ratings`` ratings (index space kept)."""
    if min_item_ratings <= 0:
        return ratings
    keep = ratings.item_counts[ratings.items] >= min_item_ratings
    return ratings.subset(keep)


def split(ratings: SparseRatings, spec: SplitSpec):
    """Random train/validation/test split.

    With coverage on, one entry per user and one per item are pinned to the
    training part before the rest are assigned at random.  The validation part
    is carved out of the training share and never receives pinned entries.
    Returns (train, validation, test) sharing the original index space.
    """
    data = filter_items(ratings, spec.min_item_ratings)
    n = len(data)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    perm = rng.permutation(n)
    pinned = np.zeros(n, dtype=bool)
    if spec.require_coverage and n:
        # first entry of each user/item in a random order gets pinned
        seen_i = np.zeros(data.num_items, dtype=bool)
        u, it = data.users[perm], data.items[perm]
        _, first_u = np.unique(u, return_index=True)
        pinned[perm[first_u]] = True
        seen_i[data.items[pinned]] = True
        _, first_i = np.unique(it, return_index=True)
        need = ~seen_i[it[first_i]]
        pinned[perm[first_i[need]]] = True
    n_train = int(round(spec.train_fraction * n))
    n_pinned = int(pinned.sum())
    if n_pinned > n_train:
        raise ConfigError(
            f"coverage needs {n_pinned} pinned training entries but the training "
            f"share holds only {n_train}")
    rest = perm[~pinned[perm]]
    train_idx = np.concatenate([np.flatnonzero(pinned), rest[:n_train - n_pinned]])
    test_idx = rest[n_train - n_pinned:]
    n_val = int(round(spec.validation_fraction * n_train))
    free = rest[:n_train - n_pinned]
    val_idx = free[:n_val] if n_val <= len(free) else free
    fold = np.full(n, 2, dtype=np.int8)
    fold[train_idx] = 0
    fold[val_idx] = 1
    return data.subset(fold == 0), data.subset(fold == 1), data.subset(fold == 2)


def write_manifest(path, folds, user_ids=None, item_ids=None):
    """CSV manifest ``user,item,rating,fold`` for named folds."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "rating", "fold"])
        for name, part in folds.items():
            for i, j, r in zip(part.users, part.items, part.values):
                w.writerow([user_ids[i] if user_ids is not None else i,
                            item_ids[j] if item_ids is not None else j, f"{r:g}", name])


def read_manifest(path, num_users, num_items, user_ids=None, item_ids=None,
                  scale=(1.0, 5.0)):
    """Inverse of ``write_manifest``; returns a dict fold -> SparseRatings."""
    uix = {str(u): k for k, u in enumerate(user_ids)} if user_ids is not None else None
    iix = {str(v): k for k, v in enumerate(item_ids)} if item_ids is not None else None
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            i = uix[rec["user"]] if uix else int(rec["user"])
            j = iix[rec["item"]] if iix else int(rec["item"])
            rows.setdefault(rec["fold"], []).append((i, j, float(rec["rating"])))
    out = {}
    for name, trip in rows.items():
        a = np.array(trip)
        out[name] = SparseRatings.from_triplets(a[:, 0], a[:, 1], a[:, 2],
                                                num_users, num_items, scale)
    return out


def write_id_map(path, ids):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["external_id", "internal_index"])
        for k, e in enumerate(ids):
            w.writerow([e, k])


def read_id_map(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["internal_index"]))
    return [r["external_id"] for r in rows]


MOVIELENS_QUANTILES = (0.01, 0.10, 0.25, 0.30, 0.50, 0.70, 0.90, 1.0)


@dataclass
class FrequencyBins:
    """Bins over per-user training counts; bin k holds counts in (edges[k-1], edges[k]]."""

    edges: list
    labels: list = field(default_factory=list)

    def assign(self, counts):
        return np.searchsorted(np.asarray(self.edges), np.asarray(counts), side="left")

    def ranges(self):
        out, prev = [], None
        for e in self.edges:
            out.append(f"<={e}" if prev is None else f"{prev + 1}-{e}")
            prev = e
        return out


def frequency_bins(train: SparseRatings, quantiles=MOVIELENS_QUANTILES) -> FrequencyBins:
    """Nearest-rank quantiles of per-user training counts.

    Users whose count equals an edge belong to the lower bin.  Quantiles that
    collapse onto the same count are merged, keeping the first label.
    """
    q = np.asarray(quantiles, float)
    if np.any(q <= 0) or np.any(q > 1) or np.any(np.diff(q) <= 0):
        raise ValueError("quantiles must be ascending in (0, 1]")
    counts = train.user_counts
    counts = np.sort(counts[counts > 0])
    if len(counts) == 0:
        raise ValueError("training set has no rated users")
    ranks = np.ceil(q * len(counts)).astype(int) - 1
    edges, labels = [], []
    for qq, r in zip(q, ranks):
        e = int(counts[max(r, 0)])
        if edges and e <= edges[-1]:
            continue
        edges.append(e)
        labels.append(f"{qq:g}")
    if edges[-1] < counts[-1]:
        edges[-1] = int(counts[-1])
    return FrequencyBins(edges, labels)
