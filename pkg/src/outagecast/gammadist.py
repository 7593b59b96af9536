"""Gamma distribution math for duration modelling.

Durations are in hours.  ``k`` is the shape, ``theta`` the scale.  The
special functions here (log-gamma, digamma, trigamma, regularized lower
incomplete gamma) are self-contained so they can back differentiable
graph nodes without depending on scipy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc

MIN_DURATION_H = 1.0 / 60.0

# Lanczos coefficients, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class GammaParamError(ValueError):
    pass


@dataclass(frozen=True)
class GammaParams:
    """Shape ``k`` (dimensionless) and scale ``theta`` (hours)."""

    k: float
    theta: float

    def __post_init__(self):
        if not (self.k > 0 and math.isfinite(self.k)):
            raise GammaParamError(f"shape k must be positive and finite, got {self.k}")
        if not (self.theta > 0 and math.isfinite(self.theta)):
            raise GammaParamError(f"scale theta must be positive and finite, got {self.theta}")


# ----------------------------------------------------------------------
# special functions (numpy, elementwise)
# ----------------------------------------------------------------------


def _lgamma_pos(x):
    # valid for x >= 0.5
    z = x - 1.0
    a = np.full_like(z, _LANCZOS[0])
    for i in range(1, 9):
        a = a + _LANCZOS[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(a)


def lgamma(x):
    """log|Gamma(x)| for x > 0 via the Lanczos approximation."""
    x = np.asarray(x, dtype=np.float64)
    if (x <= 0).any():
        raise GammaParamError("lgamma is only defined here for positive arguments")
    small = x < 0.5
    if not small.any():
        return _lgamma_pos(x)
    out = np.empty_like(x)
    out[~small] = _lgamma_pos(x[~small])
    xs = x[small]
    # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
    out[small] = np.log(np.pi / np.abs(np.sin(np.pi * xs))) - _lgamma_pos(1.0 - xs)
    return out


def digamma(x):
    """psi(x) for x > 0: upward recurrence to x >= 10, then the asymptotic series."""
    x = np.array(x, dtype=np.float64)
    if (x <= 0).any():
        raise GammaParamError("digamma is only defined here for positive arguments")
    if x.ndim == 0 and math.isfinite(x):
        return np.float64(_digamma_scalar(float(x)))
    acc = np.zeros_like(x)
    while True:
        low = x < 10.0
        if not low.any():
            break
        acc = acc - np.where(low, 1.0 / np.where(low, x, 1.0), 0.0)
        x = np.where(low, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132)))))
    return acc + np.log(x) - 0.5 * inv - series


def _digamma_scalar(x):
    acc = 0.0
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132)))))
    return acc + math.log(x) - 0.5 * inv - series


def trigamma(x):
    """psi'(x) for x > 0, same recurrence-then-asymptotic scheme."""
    x = np.array(x, dtype=np.float64)
    if (x <= 0).any():
        raise GammaParamError("trigamma is only defined here for positive arguments")
    acc = np.zeros_like(x)
    while True:
        low = x < 10.0
        if not low.any():
            break
        xl = np.where(low, x, 1.0)
        acc = acc + np.where(low, 1.0 / (xl * xl), 0.0)
        x = np.where(low, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (1.0 + inv * (0.5 + inv * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (1.0 / 30))))))
    return acc + series


def _gammainc_series(a, x):
    lg = float(lgamma(a))
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - lg)


def _gammaincc_cf(a, x):
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    lg = float(lgamma(a))
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - lg) * h


def gammainc_lower(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0:
        raise GammaParamError("shape must be positive")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return min(1.0, _gammainc_series(a, x))
    return max(0.0, 1.0 - _gammaincc_cf(a, x))


# ----------------------------------------------------------------------
# distribution functions
# ----------------------------------------------------------------------


def log_pdf(d, p: GammaParams):
    if not d > 0:
        raise GammaParamError(f"duration must be positive, got {d}")
    k, theta = p.k, p.theta
    return float(-lgamma(k) - k * math.log(theta) + (k - 1.0) * math.log(d) - d / theta)


def pdf(d, p: GammaParams):
    if d == 0:
        if p.k < 1:
            return math.inf
        return 1.0 / p.theta if p.k == 1 else 0.0
    return math.exp(log_pdf(d, p))


def nll(d, p: GammaParams):
    """Negative log-likelihood; positive durations below one minute are clamped."""
    if not d > 0:
        raise GammaParamError(f"duration must be positive, got {d}")
    return -log_pdf(max(d, MIN_DURATION_H), p)


def mean(p: GammaParams):
    return p.k * p.theta


def mode(p: GammaParams):
    return (p.k - 1.0) * p.theta if p.k >= 1 else 0.0


def cdf(d, p: GammaParams):
    if d < 0:
        raise GammaParamError(f"cdf needs d >= 0, got {d}")
    return gammainc_lower(p.k, d / p.theta)


def quantile(q, p: GammaParams, tol=1e-12):
    """Inverse CDF by safeguarded Newton inside a bisection bracket."""
    if not 0.0 < q < 1.0:
        raise GammaParamError(f"quantile level must lie in (0, 1), got {q}")
    k = p.k
    lo, hi = 0.0, max(1.0, k)
    while gammainc_lower(k, hi) < q:
        lo, hi = hi, hi * 2.0
    lg = float(lgamma(k))
    x = 0.5 * (lo + hi)
    for _ in range(200):
        f = gammainc_lower(k, x) - q
        if abs(f) < tol:
            break
        if f < 0:
            lo = x
        else:
            hi = x
        dens = math.exp((k - 1.0) * math.log(x) - x - lg) if x > 0 else 0.0
        step = x - f / dens if dens > 0 else None
        if step is None or not (lo < step < hi):
            step = 0.5 * (lo + hi)
        if abs(step - x) < 1e-15 * max(1.0, x):
            x = step
            break
        x = step
    return x * p.theta


def sample(p: GammaParams, rng: np.random.Generator, size=None):
    """Marsaglia-Tsang draws; shapes below one use the U**(1/k) boost."""
    n = 1 if size is None else int(np.prod(size))
    k = p.k
    boost = k < 1.0
    a = k + 1.0 if boost else k
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(16, int((n - filled) * 1.1))
        z = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * z) ** 3
        ok = v > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.log(np.where(ok, v, 1.0))
            accept = ok & (np.log(u) < 0.5 * z * z + d - d * v + d * logv)
        draws = (d * v)[accept]
        take = min(draws.size, n - filled)
        out[filled:filled + take] = draws[:take]
        filled += take
    if boost:
        out *= rng.random(n) ** (1.0 / k)
    out *= p.theta
    if size is None:
        return float(out[0])
    return out.reshape(size)


# ----------------------------------------------------------------------
# differentiable nodes
# ----------------------------------------------------------------------


def lgamma_node(x):
    x = nc.constant(x)
    return nc.make_node(lgamma(x.data), (x,), lambda g: (g * digamma(x.data),), "lgamma")


def digamma_node(x):
    x = nc.constant(x)
    return nc.make_node(digamma(x.data), (x,), lambda g: (g * trigamma(x.data),), "digamma")


def nll_parts(d, k, theta):
    """``(nll, d/dk, d/dtheta)`` for plain floats; ``d`` clamped at one minute."""
    d = max(float(d), MIN_DURATION_H)
    if not (k > 0 and theta > 0):
        raise GammaParamError(f"invalid gamma parameters k={k}, theta={theta}")
    log_t, log_d = math.log(theta), math.log(d)
    val = float(lgamma(k)) + k * log_t - (k - 1.0) * log_d + d / theta
    dk = float(digamma(k)) + log_t - log_d
    # factored so a theta near the softplus floor does not square to zero
    dt = (k - d / theta) / theta
    return val, dk, dt


def nll_node(d, k, theta):
    """Gamma negative log-likelihood of duration ``d`` as a graph node.

    ``k`` and ``theta`` are scalar Values; ``d`` is a plain positive float,
    clamped below at one minute.
    """
    k, theta = nc.constant(k), nc.constant(theta)
    val, dk, dt = nll_parts(d, float(k.data), float(theta.data))

    def bw(g):
        return g * dk, g * dt

    return nc.make_node(np.array(val), (k, theta), bw, "gamma_nll")


def nll_array(d, k, theta):
    """Vectorized NLL over arrays (no graph)."""
    d = np.maximum(np.asarray(d, dtype=np.float64), MIN_DURATION_H)
    k = np.asarray(k, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    return lgamma(k) + k * np.log(theta) - (k - 1.0) * np.log(d) + d / theta
