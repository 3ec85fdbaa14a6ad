"""Scalar special functions, seeded random streams and the von Mises sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

# Below this argument the power series is summed; above it the scaled
# large-argument expansion is used. Both agree to ~1e-15 at the switch.
SERIES_CUTOFF = 15.0
_ASYMPTOTIC_TERMS = 40


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by ``(master_seed, key)``.

    Streams are derived from a :class:`numpy.random.SeedSequence` with the key
    as spawn key and drive a counter-based Philox generator, so the variates
    of a stream never depend on how many other streams exist or which thread
    consumes them.
    """

    master_seed: int
    stream_index: tuple = (0,)
    gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        key = self.stream_index if isinstance(self.stream_index, tuple) else (int(self.stream_index),)
        object.__setattr__(self, "stream_index", tuple(int(k) for k in key))
        ss = np.random.SeedSequence(entropy=int(self.master_seed) % 2**64, spawn_key=self.stream_index)
        object.__setattr__(self, "gen", np.random.Generator(np.random.Philox(ss)))

    def child(self, *keys: int) -> "RngStream":
        """A new independent stream keyed below this one."""
        return RngStream(self.master_seed, self.stream_index + tuple(int(k) for k in keys))

    # thin conveniences so call sites read naturally
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def gamma(self, shape, scale=1.0, size=None):
        return self.gen.gamma(shape, scale, size)


def as_stream(rng, default_seed: int = 0) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(default_seed)
    return RngStream(int(rng))


# --------------------------------------------------------------------------
# modified Bessel functions of the first kind, orders 0 and 1


def _series_scaled(order: int, z: np.ndarray) -> np.ndarray:
    half = 0.5 * z
    term = np.ones_like(z) if order == 0 else half.copy()
    total = term.copy()
    q = half * half
    for k in range(1, 200):
        term = term * q / (k * (k + order))
        total += term
        if np.all(term <= 1e-17 * total):
            break
    return total * np.exp(-z)


def _asymptotic_scaled(order: int, z: np.ndarray) -> np.ndarray:
    mu = 4.0 * order * order
    term = np.ones_like(z)
    total = np.ones_like(z)
    for k in range(1, _ASYMPTOTIC_TERMS):
        nxt = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * z)
        # stop each argument once its terms start growing again
        shrinking = np.abs(nxt) < np.abs(term)
        term = np.where(shrinking, nxt, 0.0)
        total += term
        if not np.any(term):
            break
    return total / np.sqrt(2.0 * np.pi * z)


def bessel_ie(order: int, z):
    """Exponentially scaled ``exp(-z) * I_order(z)`` for order 0 or 1."""
    if order not in (0, 1):
        raise DomainError("only orders 0 and 1 are supported")
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr < 0) or np.any(np.isnan(z_arr)):
        raise DomainError("Bessel argument must be >= 0")
    flat = np.atleast_1d(z_arr).astype(float)
    out = np.empty_like(flat)
    small = flat < SERIES_CUTOFF
    if np.any(small):
        out[small] = _series_scaled(order, flat[small])
    if np.any(~small):
        out[~small] = _asymptotic_scaled(order, flat[~small])
    return out.reshape(z_arr.shape) if z_arr.ndim else float(out[0])


def bessel_i(order: int, z):
    """Modified Bessel function ``I_order(z)``; overflows to ``inf`` past z ~ 713."""
    with np.errstate(over="ignore"):
        return bessel_ie(order, z) * np.exp(z)


def bessel_ratio(z):
    """Return ``(I1(z)/I0(z), I1(z)/(z*I0(z)))`` without overflow.

    The first ratio is the mean resultant length of a von Mises law with
    concentration ``z``.
    """
    z_arr = np.asarray(z, dtype=float)
    if np.any(~(z_arr > 0)):
        raise DomainError("bessel_ratio requires z > 0")
    r1 = np.asarray(bessel_ie(1, z_arr) / bessel_ie(0, z_arr))
    r2 = r1 / z_arr
    if z_arr.ndim == 0:
        return float(r1), float(r2)
    return r1, r2


def log_multivariate_gamma(p: int, a: float) -> float:
    """``log Gamma_p(a) = p(p-1)/4 log(pi) + sum_j log Gamma(a + (1-j)/2)``."""
    if p < 1:
        raise DomainError("dimension must be >= 1")
    if not a > 0.5 * (p - 1):
        raise DomainError(f"need a > (p-1)/2, got a={a}, p={p}")
    return 0.25 * p * (p - 1) * math.log(math.pi) + sum(math.lgamma(a + 0.5 * (1 - j)) for j in range(1, p + 1))


# --------------------------------------------------------------------------
# von Mises


@dataclass(frozen=True)
class VonMisesParams:
    mean_angle: float
    concentration: float

    def __post_init__(self):
        if not (np.isfinite(self.concentration) and self.concentration > 0):
            raise DomainError("von Mises concentration must be finite and > 0")


def _vonmises_deviation(gen: np.random.Generator, kappa: np.ndarray) -> np.ndarray:
    """Best & Fisher (1979) wrapped-Cauchy rejection sampler, vectorized.

    ``kappa`` is an array of concentrations; one zero-mean angle is drawn per
    entry.
    """
    kappa = np.asarray(kappa, dtype=float)
    tau = 1.0 + np.sqrt(1.0 + 4.0 * kappa * kappa)
    rho = (tau - np.sqrt(2.0 * tau)) / (2.0 * kappa)
    r = (1.0 + rho * rho) / (2.0 * rho)
    out = np.empty(kappa.shape)
    todo = np.arange(kappa.size)
    flat_k, flat_r = kappa.ravel(), r.ravel()
    flat_out = out.ravel()
    while todo.size:
        u1, u2, u3 = gen.random((3, todo.size))
        k, rr = flat_k[todo], flat_r[todo]
        zc = np.cos(np.pi * u1)
        f = (1.0 + rr * zc) / (rr + zc)
        c = k * (rr - f)
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = (c * (2.0 - c) - u2 > 0) | (np.log(c / u2) + 1.0 - c >= 0)
        accept &= np.isfinite(f)
        idx = todo[accept]
        flat_out[idx] = np.sign(u3[accept] - 0.5) * np.arccos(np.clip(f[accept], -1.0, 1.0))
        todo = todo[~accept]
    return flat_out.reshape(kappa.shape)


def vonmises_sample(rng: RngStream, params: VonMisesParams, size=None):
    """Draw angles from the von Mises law ``exp(k cos(t - mu)) / (2 pi I0(k))``.

    Samples are returned as ``mean_angle + d`` with ``d`` in ``[-pi, pi]``.
    """
    shape = () if size is None else size
    kappa = np.full(shape, float(params.concentration))
    dev = _vonmises_deviation(rng.gen, kappa)
    out = params.mean_angle + dev
    return float(out) if size is None else out


def vonmises_deviation(rng: RngStream, kappa) -> np.ndarray:
    """Zero-mean von Mises draws with per-entry concentrations ``kappa``."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(~(kappa > 0)):
        raise DomainError("von Mises concentration must be > 0")
    return _vonmises_deviation(rng.gen, kappa)
