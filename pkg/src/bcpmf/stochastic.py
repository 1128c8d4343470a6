"""Sampling kernels and expectation identities used by the inference engines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

_JITTER = 1e-10
_MAX_JITTER_TRIES = 3


@dataclass(frozen=True)
class RngStream:
    """Seed plus substream id.  ``generator()`` always restarts the same stream."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)


def make_rng(seed=None, stream_id=0) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return RngStream(0 if seed is None else int(seed), stream_id).generator()


def cholesky_jitter(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying with a small diagonal jitter on failure.

    Works on a single matrix or a stack of matrices.
    """
    A = np.asarray(A, dtype=float)
    eye = np.eye(A.shape[-1])
    for attempt in range(_MAX_JITTER_TRIES + 1):
        try:
            return np.linalg.cholesky(A + attempt * _JITTER * eye)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("matrix is not positive definite, even after jitter")


def gaussian_from_precision(h, precision):
    """Mean and lower Cholesky factor for N(P^{-1} h, P^{-1}); batched over leading axes."""
    L = cholesky_jitter(precision)
    y = np.linalg.solve(L, np.asarray(h, float)[..., None])
    mean = np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]
    return mean, L


def draw_with_factor(mean, L, rng, noise=None):
    """mean + L^{-T} z, which has covariance (L L^T)^{-1}."""
    if noise is None:
        noise = rng.standard_normal(np.shape(mean))
    x = np.linalg.solve(np.swapaxes(L, -1, -2), noise[..., None])[..., 0]
    return mean + x


def sample_mvn(mean, precision, rng) -> np.ndarray:
    """Draw from N(mean, precision^{-1}).  Batched when inputs carry a leading axis."""
    mean = np.asarray(mean, dtype=float)
    L = cholesky_jitter(precision)
    return draw_with_factor(mean, L, rng)


def sample_mvn_canonical(h, precision, rng, deterministic=False):
    """Draw from the Gaussian with natural parameters (h, precision)."""
    mean, L = gaussian_from_precision(h, precision)
    if deterministic:
        return mean
    return draw_with_factor(mean, L, rng)


def sample_wishart(dof, scale, rng) -> np.ndarray:
    """Bartlett construction: Lambda = L A A^T L^T with scale = L L^T."""
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if not dof > d - 1:
        raise ValueError(f"Wishart dof must exceed d - 1 = {d - 1}, got {dof}")
    L = cholesky_jitter(scale)
    A = np.zeros((d, d))
    A[np.diag_indices(d)] = np.sqrt(rng.chisquare(dof - np.arange(d)))
    rows, cols = np.tril_indices(d, -1)
    A[rows, cols] = rng.standard_normal(len(rows))
    LA = L @ A
    out = LA @ LA.T
    return 0.5 * (out + out.T)


def sample_gamma(shape, rate, rng, size=None):
    """Gamma draw parameterized by shape and rate."""
    return rng.gamma(shape, 1.0 / np.asarray(rate, float), size=size)


def _lower_tail(a, x):
    return special.gammainc(a, x)


def _upper_tail(a, x):
    return special.gammaincc(a, x)


def truncated_gamma_cdf(x, shape, rate, lo, hi):
    """CDF of Gamma(shape, rate) restricted to (lo, hi)."""
    a = shape
    F = lambda t: special.gammainc(a, rate * np.clip(t, 0, None))
    Flo, Fhi = F(lo), F(hi)
    return np.clip((F(np.clip(x, lo, hi)) - Flo) / (Fhi - Flo), 0.0, 1.0)


def _log_concave_tail(a, lo, hi, rng):
    """Exact draws from x^{a-1} e^{-x} on (lo, hi) for a >= 1 when incomplete gamma
    values underflow.  Uses a tangent-line exponential envelope at the endpoint
    closest to the mode, valid because the log-density is concave."""
    mode = a - 1.0
    x0 = np.where(hi < mode, hi, lo)
    with np.errstate(divide="ignore"):
        slope = np.where(x0 > 0, (a - 1.0) / np.where(x0 > 0, x0, 1.0) - 1.0, -1.0)
    logf = lambda x, a: (a - 1.0) * np.log(x) - x
    out = np.empty(len(lo))
    todo = np.arange(len(lo))
    while len(todo):
        s, l, h, p, ak = slope[todo], lo[todo], hi[todo], x0[todo], a[todo]
        u = rng.random(len(todo))
        # sample from exp(s * x) on (l, h)
        flat = np.abs(s * (h - l)) < 1e-12
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            span = np.expm1(s * (h - l))
            x = np.where(flat, l + u * (h - l), l + np.log1p(u * span) / np.where(flat, 1, s))
        x = np.clip(x, l, h)
        env = logf(p, ak) + s * (x - p)
        accept = np.log(rng.random(len(todo))) <= logf(x, ak) - env
        out[todo[accept]] = x[accept]
        todo = todo[~accept]
    return out


def sample_truncated_gamma(shape, rate, lo, hi, rng, size=None, tol=1e-12):
    """Exact draws from Gamma(shape, rate) restricted to (lo, hi).

    Inverse CDF on the regularized incomplete gamma function, solved by
    bisection.  The upper tail function is used when the interval sits in the
    right tail so that tiny masses keep their relative precision.
    """
    shape, rate, lo, hi = np.broadcast_arrays(*(np.asarray(v, float) for v in
                                                (shape, rate, lo, hi)))
    if size is not None:
        shape, rate, lo, hi = (np.broadcast_to(v, size) for v in (shape, rate, lo, hi))
    out_shape = shape.shape
    a, b = shape.ravel(), rate.ravel()
    l, h = lo.ravel() * b, hi.ravel() * b
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("shape and rate must be positive")
    if np.any(l >= h):
        raise ValueError("truncation bounds must satisfy lo < hi")
    u = rng.random(len(a))

    use_upper = _lower_tail(a, l) > 0.5
    P_lo = np.where(use_upper, _upper_tail(a, l), _lower_tail(a, l))
    P_hi = np.where(use_upper, _upper_tail(a, h), _lower_tail(a, h))
    mass = np.abs(P_hi - P_lo)
    x = np.empty(len(a))
    tiny = mass < 1e-300
    if np.any(tiny & (a < 1)):
        raise ValueError("truncation interval carries no probability mass")
    if np.any(tiny):
        x[tiny] = _log_concave_tail(a[tiny], l[tiny], h[tiny], rng)

    ok = ~tiny
    if np.any(ok):
        a_, l_, h_, up = a[ok], l[ok], h[ok], use_upper[ok]
        target = P_lo[ok] + u[ok] * (P_hi[ok] - P_lo[ok])
        left, right = l_.copy(), h_.copy()
        for _ in range(200):
            mid = 0.5 * (left + right)
            val = np.where(up, _upper_tail(a_, mid), _lower_tail(a_, mid))
            # lower tail increases with x, upper tail decreases
            go_right = np.where(up, val > target, val < target)
            left = np.where(go_right, mid, left)
            right = np.where(go_right, right, mid)
            if np.all(right - left <= tol * np.maximum(1.0, right)):
                break
        x[ok] = 0.5 * (left + right)
    x = np.clip(x / b, lo.ravel(), hi.ravel())
    # keep draws inside the open interval
    x = np.where(x <= lo.ravel(), np.nextafter(lo.ravel(), np.inf), x)
    x = np.where(x >= hi.ravel(), np.nextafter(hi.ravel(), -np.inf), x)
    return x.reshape(out_shape) if out_shape else float(x[0])


def truncated_gamma_point(shape, rate, lo, hi):
    """Gamma mean shape/rate clamped to [lo, hi]."""
    return np.clip(np.asarray(shape, float) / rate, lo, hi)


def e_log_gamma(shape, rate):
    """E[log X] for X ~ Gamma(shape, rate)."""
    return special.digamma(shape) - np.log(rate)


def gamma_entropy(shape, rate):
    return shape - np.log(rate) + special.gammaln(shape) + (1.0 - shape) * special.digamma(shape)


def logdet(A):
    sign, val = np.linalg.slogdet(A)
    if np.any(sign <= 0):
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return val


def e_logdet_wishart(dof, scale):
    """E[log |X|] for X ~ Wishart(dof, scale)."""
    scale = np.asarray(scale, float)
    d = scale.shape[0]
    return (special.digamma(0.5 * (dof + 1 - np.arange(1, d + 1))).sum()
            + d * np.log(2.0) + logdet(scale))


def wishart_entropy(dof, scale):
    scale = np.asarray(scale, float)
    d = scale.shape[0]
    e_ld = e_logdet_wishart(dof, scale)
    log_norm = (-0.5 * dof * logdet(scale) - 0.5 * dof * d * np.log(2.0)
                - special.multigammaln(0.5 * dof, d))
    return -log_norm - 0.5 * (dof - d - 1) * e_ld + 0.5 * dof * d
