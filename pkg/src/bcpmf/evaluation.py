"""Metrics and diagnostic exports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import FrequencyBins
from .model import SparseRatings


def rmse(predictions, truth) -> float:
    predictions = np.asarray(predictions, float)
    truth = truth.values if isinstance(truth, SparseRatings) else np.asarray(truth, float)
    if len(truth) == 0 or len(predictions) != len(truth):
        raise ValueError("rmse needs aligned, non-empty inputs")
    return float(np.sqrt(np.mean((predictions - truth) ** 2)))


@dataclass
class BinRow:
    label: str
    count_range: str
    rmse: float
    users: int
    ratings: int
    sse: float


@dataclass
class BinnedReport:
    rows: list
    overall: float
    comparison: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["quantile", "count_range", "rmse", "users", "ratings"]
            if self.comparison:
                head += ["rmse_other", "relative_change_pct"]
            w.writerow(head)
            for k, r in enumerate(self.rows):
                row = [r.label, r.count_range, f"{r.rmse:.6f}", r.users, r.ratings]
                if self.comparison:
                    other, change = self.comparison[k]
                    row += [f"{other:.6f}", f"{change:.4f}"]
                w.writerow(row)
            w.writerow(["all", "", f"{self.overall:.6f}",
                        sum(r.users for r in self.rows), sum(r.ratings for r in self.rows)])


def relative_change(rmse_a, rmse_b):
    """Percent improvement of B over A: 100 (a - b) / a."""
    return 100.0 * (rmse_a - rmse_b) / rmse_a


def rmse_by_frequency(predictions, test: SparseRatings, train: SparseRatings,
                      bins: FrequencyBins, baseline=None) -> BinnedReport:
    """Test RMSE per training-frequency bin.

    ``baseline`` (optional, aligned with ``test``) adds a relative-change column
    computed as 100 (rmse_baseline - rmse) / rmse_baseline, so positive values
    mean ``predictions`` improve on the baseline.
    """
    predictions = np.asarray(predictions, float)
    err2 = (predictions - test.values) ** 2
    counts = train.user_counts
    bin_of_user = bins.assign(counts)
    bin_of_user[counts == 0] = 0
    b = bin_of_user[test.users]
    nb = len(bins.edges)
    sse = np.bincount(b, err2, minlength=nb)
    nrat = np.bincount(b, minlength=nb)
    has_test = np.bincount(test.users, minlength=test.num_users) > 0
    nusers = np.bincount(bin_of_user[has_test], minlength=nb)
    labels = bins.labels or [str(k) for k in range(nb)]
    ranges = bins.ranges()
    rows = []
    for k in range(nb):
        val = float(np.sqrt(sse[k] / nrat[k])) if nrat[k] else float("nan")
        rows.append(BinRow(labels[k], ranges[k], val, int(nusers[k]), int(nrat[k]),
                           float(sse[k])))
    report = BinnedReport(rows, rmse(predictions, test))
    if baseline is not None:
        other = rmse_by_frequency(baseline, test, train, bins)
        report.comparison = [(o.rmse, relative_change(o.rmse, r.rmse))
                             for o, r in zip(other.rows, rows)]
    return report


def _pearson(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 3:
        raise ValueError("need at least 3 entities for a correlation")
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined for constant input")
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def entity_errors(prec, predictions, entries: SparseRatings):
    """Per-user mean of tau beta_j e^2 and per-item mean of tau alpha_i e^2."""
    e2 = (entries.values - np.asarray(predictions, float)) ** 2
    u, it = entries.users, entries.items
    n = np.bincount(u, minlength=len(prec.alpha))
    m = np.bincount(it, minlength=len(prec.beta))
    user_err = np.bincount(u, prec.tau * prec.beta[it] * e2, minlength=len(prec.alpha))
    item_err = np.bincount(it, prec.tau * prec.alpha[u] * e2, minlength=len(prec.beta))
    with np.errstate(invalid="ignore", divide="ignore"):
        return user_err / n, item_err / m


def precision_error_correlation(prec, predictions, entries: SparseRatings):
    """Pearson correlation of log precision factor against log mean weighted error,
    for users and for items.  Entities without entries or with zero error are skipped."""
    user_err, item_err = entity_errors(prec, predictions, entries)
    out = []
    for factor, err in ((prec.alpha, user_err), (prec.beta, item_err)):
        ok = np.isfinite(err) & (err > 0)
        out.append(_pearson(np.log(factor[ok]), np.log(err[ok])))
    return tuple(out)


def export_cdf(values, path):
    v = np.sort(np.asarray(values, float))
    cdf = np.arange(1, len(v) + 1) / len(v)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "cdf"])
        for a, b in zip(v, cdf):
            w.writerow([repr(float(a)), repr(float(b))])
    return v, cdf


def max_feature_variance(variances):
    """Largest marginal variance per user from an (N, d) or (N, d, d) array."""
    variances = np.asarray(variances, float)
    if variances.ndim == 3:
        variances = np.diagonal(variances, axis1=1, axis2=2)
    return variances.max(axis=1)


def sample_variance(samples):
    """Across-sample variance per user and dimension from an (T, N, d) stack."""
    samples = np.asarray(samples, float)
    return samples.var(axis=0)


def feature_variance_vs_frequency(variances, train_counts, path):
    mv = max_feature_variance(variances)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "n_ratings", "max_variance"])
        for i, (n, v) in enumerate(zip(train_counts, mv)):
            w.writerow([i, int(n), repr(float(v))])
    return mv
