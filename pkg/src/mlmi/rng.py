"""Seedable random streams and exact samplers for the imputation engines.

Every sampler takes an :class:`RngStream` (or a raw numpy ``Generator``) so
that a run is fully reproducible from a single 64-bit seed, and so that
replications / imputations can be farmed out to independent substreams.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, PCG64, SeedSequence

__all__ = [
    "RngStream",
    "mvn_sample",
    "wishart_sample",
    "invwishart_sample",
    "trunc_normal_sample",
    "trunc_normal_many",
    "invgamma_sample",
    "chi2_sample",
]

# Relative eigenvalue tolerance when clamping marginally indefinite
# covariance matrices produced by round-off in long Gibbs runs.
PSD_TOL = 1e-10


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by (seed, stream_id, path).

    Identical identifiers yield identical sample sequences; distinct
    identifiers yield statistically independent streams (counter-based
    splitting through ``SeedSequence`` spawn keys).
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()
    _gen: Generator | None = field(default=None, compare=False, repr=False)

    @property
    def generator(self) -> Generator:
        if self._gen is None:
            ss = SeedSequence(self.seed, spawn_key=(self.stream_id, *self.path))
            object.__setattr__(self, "_gen", Generator(PCG64(ss)))
        return self._gen

    def substream(self, index: int) -> "RngStream":
        """Independent child stream; deterministic in (self, index)."""
        return RngStream(self.seed, self.stream_id, self.path + (index,))


def _as_generator(rng) -> Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


def psd_factor(cov: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetric square root of a (possibly marginally indefinite) matrix.

    Eigenvalues in [-tol*scale, 0) are clamped to 0; anything lower raises.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("cov must be square")
    scale = max(np.abs(cov).max(), 1.0)
    if not np.allclose(cov, cov.T, atol=1e-8 * scale):
        raise ValueError("cov must be symmetric")
    # fast path: Cholesky succeeds for well-conditioned SPD input
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh((cov + cov.T) / 2.0)
    if w.min() < -tol * scale:
        raise ValueError(f"cov has negative eigenvalue {w.min():.3e} beyond tolerance")
    w = np.clip(w, 0.0, None)
    return v * np.sqrt(w)


def mvn_sample(mean, cov, rng, size: int | None = None) -> np.ndarray:
    """Draw from N(mean, cov) via a symmetric factorization of cov."""
    gen = _as_generator(rng)
    mean = np.asarray(mean, dtype=float)
    factor = psd_factor(cov)
    d = mean.shape[0]
    if size is None:
        return mean + factor @ gen.standard_normal(d)
    return mean + gen.standard_normal((size, d)) @ factor.T


def wishart_sample(df: float, scale, rng) -> np.ndarray:
    """Wishart(df, scale) draw by the Bartlett construction; E = df * scale."""
    gen = _as_generator(rng)
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if df <= d - 1:
        raise ValueError(f"wishart df must exceed d-1 = {d - 1}, got {df}")
    try:
        L = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise ValueError("wishart scale must be symmetric positive definite") from exc
    A = np.zeros((d, d))
    rows, cols = np.tril_indices(d, -1)
    A[rows, cols] = gen.standard_normal(rows.size)
    A[np.arange(d), np.arange(d)] = np.sqrt(gen.chisquare(df - np.arange(d)))
    LA = L @ A
    return LA @ LA.T


def invwishart_sample(df: float, scale, rng) -> np.ndarray:
    """Inverse-Wishart draw: inverse of Wishart(df, scale^-1)."""
    scale = np.asarray(scale, dtype=float)
    w = wishart_sample(df, np.linalg.inv(scale), rng)
    return np.linalg.inv(w)


def _truncnorm_std_lower(lower: np.ndarray, gen: Generator) -> np.ndarray:
    """Standard normal draws conditioned on z > lower, elementwise.

    Inverse-CDF in the central region; exponential rejection (Robert 1995)
    once the bound is deep in the upper tail, where the CDF saturates.
    """
    from scipy.special import ndtr, ndtri

    lower = np.asarray(lower, dtype=float)
    out = np.empty_like(lower)
    central = lower < 4.0
    if central.any():
        a = lower[central]
        u = gen.uniform(size=a.shape)
        p = ndtr(a)
        out[central] = ndtri(p + u * (1.0 - p))
    tail = ~central
    if tail.any():
        a = lower[tail]
        alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
        z = np.empty_like(a)
        todo = np.ones(a.shape, dtype=bool)
        while todo.any():
            prop = a[todo] + gen.exponential(size=int(todo.sum())) / alpha[todo]
            acc = gen.uniform(size=prop.shape) <= np.exp(
                -0.5 * (prop - alpha[todo]) ** 2
            )
            idx = np.flatnonzero(todo)[acc]
            z.flat[idx] = prop[acc]
            todo.flat[idx] = False
        out[tail] = z
    return out


def trunc_normal_sample(mu: float, sigma: float, region: str, rng) -> float:
    """Draw from N(mu, sigma^2) conditioned on the sign region.

    region is 'positive' (draw > 0) or 'negative' (draw < 0).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if region not in ("positive", "negative"):
        raise ValueError("region must be 'positive' or 'negative'")
    gen = _as_generator(rng)
    if region == "positive":
        z = _truncnorm_std_lower(np.array([-mu / sigma]), gen)[0]
        return mu + sigma * z
    z = _truncnorm_std_lower(np.array([mu / sigma]), gen)[0]
    return mu - sigma * z


def trunc_normal_many(mu: np.ndarray, sigma, positive: np.ndarray, rng) -> np.ndarray:
    """Vectorized one-sided truncated normal draws.

    positive is a boolean array: True draws from (0, inf), False from
    (-inf, 0), with per-element means mu and scale sigma.
    """
    gen = _as_generator(rng)
    mu = np.asarray(mu, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), mu.shape)
    sign = np.where(positive, 1.0, -1.0)
    lower = -sign * mu / sigma
    z = _truncnorm_std_lower(lower, gen)
    return mu + sign * sigma * z


def invgamma_sample(shape: float, rate: float, rng, size=None):
    """Inverse-Gamma(shape, rate) draw(s); mean = rate / (shape - 1)."""
    if shape <= 0 or rate <= 0:
        raise ValueError("invgamma parameters must be positive")
    gen = _as_generator(rng)
    return rate / gen.gamma(shape, 1.0, size=size)


def chi2_sample(df: float, rng, size=None):
    if df <= 0:
        raise ValueError("chi-squared df must be positive")
    gen = _as_generator(rng)
    return gen.chisquare(df, size=size)
