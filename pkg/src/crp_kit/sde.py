"""BBED forward SDE, its Gaussian perturbation kernel, and an OU test SDE.

Both SDE classes expose the same small interface used by the samplers and
the training code::

    drift(x, y, t)        diffusion(t)
    kernel_mean(x0, y, t) kernel_sigma_sq(t)   sigma(t)

``t`` may be a scalar or an array with one entry per leading batch element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.57721566490153286060651209


class DomainError(ValueError):
    pass


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric N_C(0, 1): real and imaginary parts each N(0, 1/2)."""
    z = rng.standard_normal((2,) + tuple(shape))
    return (z[0] + 1j * z[1]) * math.sqrt(0.5)


def standard_normal_like(rng: np.random.Generator, x) -> np.ndarray:
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return complex_normal(rng, x.shape)
    return rng.standard_normal(x.shape)


def broadcast_time(t, x):
    """Reshape per-sample times (B,) so they broadcast against x of shape (B, ...)."""
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x)
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


# --------------------------------------------------------------------------
# exponential integral

def _ei_series(x: float) -> float:
    total, term, n = 0.0, 1.0, 0
    while True:
        n += 1
        term *= x / n
        inc = term / n
        total += inc
        if abs(inc) < 1e-17 * abs(total) or n > 500:
            break
    return EULER_GAMMA + math.log(abs(x)) + total


def _e1_continued_fraction(x: float) -> float:
    """E1(x) for x > 1 by the modified Lentz algorithm."""
    tiny = 1e-300
    b = x + 1.0
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        a = -float(i * i)
        b += 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x)


def _ei_asymptotic(x: float) -> float:
    total, term = 1.0, 1.0
    for n in range(1, 60):
        nxt = term * n / x
        if nxt > term:
            break
        term = nxt
        total += term
        if term < 1e-17 * total:
            break
    return math.exp(x) / x * total


def _ei_scalar(x: float) -> float:
    if x == 0.0:
        raise DomainError("Ei(0) is undefined (logarithmic singularity)")
    if -6.0 <= x <= 40.0:
        # positive arguments: all series terms share a sign, no cancellation
        return _ei_series(x)
    if x < -6.0:
        return -_e1_continued_fraction(-x)
    return _ei_asymptotic(x)


def expint_ei(x):
    """Principal-value exponential integral Ei(x) for real nonzero x."""
    if np.ndim(x) == 0:
        return _ei_scalar(float(x))
    x = np.asarray(x, dtype=np.float64)
    return np.array([_ei_scalar(v) for v in x.ravel()]).reshape(x.shape)


# --------------------------------------------------------------------------
# BBED

@dataclass(frozen=True)
class BbedParams:
    """Brownian bridge with exponential diffusion ``g(t) = c k^t``."""

    c: float = 0.51
    k: float = 2.6
    T: float = 0.999
    t_eps: float = 0.03
    t_rsp: float = 0.5

    def __post_init__(self):
        if not (self.c > 0 and self.k > 0):
            raise DomainError("c and k must be positive")
        if not 0 < self.t_eps < self.t_rsp <= self.T < 1:
            raise DomainError(
                f"need 0 < t_eps < t_rsp <= T < 1, got t_eps={self.t_eps}, "
                f"t_rsp={self.t_rsp}, T={self.T}")

    def drift(self, x, y, t):
        t = broadcast_time(t, x)
        if np.any(t >= 1.0):
            raise DomainError("BBED drift is singular at t >= 1")
        return (np.asarray(y) - np.asarray(x)) / (1.0 - t)

    def diffusion(self, t):
        return self.c * np.power(self.k, t)

    def kernel_mean(self, x0, y, t):
        x0, y = np.asarray(x0), np.asarray(y)
        if x0.shape != y.shape:
            raise ValueError(f"shape mismatch: {x0.shape} vs {y.shape}")
        t = broadcast_time(t, x0)
        return (1.0 - t) * x0 + t * y

    def kernel_sigma_sq(self, t):
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr >= 1.0) or np.any(t_arr < 0.0):
            raise DomainError("kernel variance needs 0 <= t < 1")
        c, k = self.c, self.k
        logk = math.log(k)
        flat = t_arr.ravel()
        out = np.zeros_like(flat)
        for i, s in enumerate(flat):
            if s == 0.0:
                continue
            e = _ei_scalar(2.0 * (s - 1.0) * logk) - _ei_scalar(-2.0 * logk)
            # log(k^(2k^2)) written as 2 k^2 log k to avoid overflow for large k
            out[i] = (1 - s) * c * c * ((k ** (2 * s) - 1 + s) + 2 * k * k * logk * (1 - s) * e)
        out = out.reshape(t_arr.shape)
        return float(out) if out.ndim == 0 else out

    def sigma(self, t):
        return np.sqrt(np.maximum(self.kernel_sigma_sq(t), 0.0))


@dataclass(frozen=True)
class OuTestParams:
    """dX = -theta X dt + g0 dW; the conditioning input ``y`` is ignored."""

    theta: float = 1.0
    g0: float = 1.0

    def __post_init__(self):
        if not (self.theta > 0 and self.g0 > 0):
            raise DomainError("theta and g0 must be positive")

    def drift(self, x, y, t):
        return -self.theta * np.asarray(x)

    def diffusion(self, t):
        return self.g0 * np.ones_like(np.asarray(t, dtype=np.float64))

    def kernel_mean(self, x0, y, t):
        return np.asarray(x0) * np.exp(-self.theta * broadcast_time(t, x0))

    def kernel_sigma_sq(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.g0 ** 2 * -np.expm1(-2 * self.theta * t) / (2 * self.theta)

    def sigma(self, t):
        return np.sqrt(self.kernel_sigma_sq(t))


# --------------------------------------------------------------------------
# module-level API

def drift(x, y, t, p: BbedParams = BbedParams()):
    return p.drift(x, y, t)


def diffusion(t, p: BbedParams = BbedParams()):
    return p.diffusion(t)


def kernel_mean(x0, y, t, p: BbedParams = BbedParams()):
    return p.kernel_mean(x0, y, t)


def kernel_sigma_sq(t, p: BbedParams = BbedParams()):
    return p.kernel_sigma_sq(t)


def sample_forward(x0, y, t, rng: np.random.Generator, p=BbedParams()):
    """Draw X_t from the perturbation kernel. Returns ``(xt, z)``."""
    mean = p.kernel_mean(x0, y, t)
    z = standard_normal_like(rng, mean)
    sigma = broadcast_time(p.sigma(t), mean)
    return mean + sigma * z, z


def sample_prior(y, t_start, p=BbedParams(), rng: np.random.Generator | None = None):
    """Reverse-process start X_{t_N} ~ N(y, sigma(t_start)^2 I)."""
    if rng is None:
        raise ValueError("sample_prior needs an explicit rng")
    y = np.asarray(y)
    return prior_from_noise(y, t_start, p, standard_normal_like(rng, y))


def prior_from_noise(y, t_start, p, z):
    y = np.asarray(y)
    return y + broadcast_time(p.sigma(t_start), y) * z


def ou_moments(x0: float, t: float, p: OuTestParams):
    """Exact (mean, var) of the OU test SDE started at x0."""
    if t < 0:
        raise DomainError("t must be nonnegative")
    if math.isinf(t):
        return 0.0, p.g0 ** 2 / (2 * p.theta)
    return x0 * math.exp(-p.theta * t), p.g0 ** 2 * -math.expm1(-2 * p.theta * t) / (2 * p.theta)
