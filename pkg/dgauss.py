"""Exact discrete Gaussian sampling on the integers.

Rejection sampling from discrete Laplace proposals, with every Bernoulli
trial decided by integer comparisons (no floating-point Gaussian rounding).
"""
from fractions import Fraction
from math import isqrt

import numpy as np

_CHUNK_BITS = 32


def _uniform_below(m: int, rng: np.random.Generator) -> int:
    """Uniform integer in [0, m) for arbitrarily large m."""
    if m <= 0:
        raise ValueError(f"empty range [0, {m})")
    if m < 2 ** 62:
        return int(rng.integers(0, m))
    bits = m.bit_length()
    chunks = -(-bits // _CHUNK_BITS)
    mask = (1 << bits) - 1
    while True:
        value = 0
        for word in rng.integers(0, 2 ** _CHUNK_BITS, size=chunks, dtype=np.uint64):
            value = (value << _CHUNK_BITS) | int(word)
        value &= mask
        if value < m:
            return value


def bernoulli(p: Fraction, rng: np.random.Generator) -> bool:
    return _uniform_below(p.denominator, rng) < p.numerator


def bernoulli_exp(gamma: Fraction, rng: np.random.Generator) -> bool:
    """True with probability exp(-gamma), gamma >= 0."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if gamma <= 1:
        k = 1
        while bernoulli(gamma / k, rng):
            k += 1
        return k % 2 == 1
    whole = gamma.numerator // gamma.denominator
    for _ in range(whole):
        if not bernoulli_exp(Fraction(1), rng):
            return False
    return bernoulli_exp(gamma - whole, rng)


def discrete_laplace(t: int, rng: np.random.Generator) -> int:
    """Sample with P(y) proportional to exp(-|y| / t), t a positive integer."""
    while True:
        u = _uniform_below(t, rng)
        if not bernoulli_exp(Fraction(u, t), rng):
            continue
        v = 0
        while bernoulli_exp(Fraction(1), rng):
            v += 1
        y = u + t * v
        negative = bernoulli(Fraction(1, 2), rng)
        if negative and y == 0:
            continue
        return -y if negative else y


def sample_noise(variance, rng: np.random.Generator) -> int:
    """One draw from the discrete Gaussian with parameter sigma^2 = variance, centred at 0."""
    sigma2 = Fraction(variance)
    if sigma2 <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    a, b = sigma2.numerator, sigma2.denominator
    t = isqrt(a // b) + 1
    while True:
        y = discrete_laplace(t, rng)
        gamma = Fraction((abs(y) * t * b - a) ** 2, 2 * a * b * t * t)
        if bernoulli_exp(gamma, rng):
            return y


def discrete_gaussian(value: int, variance, rng: np.random.Generator) -> int:
    """value plus exact discrete Gaussian noise of parameter sigma^2 = variance."""
    if isinstance(variance, float) and not np.isfinite(variance):
        raise ValueError(f"variance must be finite, got {variance}")
    return int(value) + sample_noise(variance, rng)
