from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from dgauss import bernoulli_exp, discrete_gaussian, discrete_laplace, sample_noise


def pmf(variance, support):
    weights = np.exp(-np.array(support, dtype=float) ** 2 / (2 * variance))
    return weights / weights.sum()


@pytest.mark.parametrize("variance", [0.5, 1, 4])
def test_sample_noise_matches_discrete_gaussian(variance):
    rng = np.random.default_rng(20)
    n = 100_000
    draws = Counter(sample_noise(variance, rng) for _ in range(n))
    half = int(4 * np.sqrt(variance)) + 1
    support = list(range(-half, half + 1))
    expected = pmf(variance, list(range(-50, 51)))
    expected = {x: p for x, p in zip(range(-50, 51), expected)}
    # fold everything beyond the window into the outermost cells
    observed = [draws[x] for x in support]
    observed[0] += sum(c for x, c in draws.items() if x < -half)
    observed[-1] += sum(c for x, c in draws.items() if x > half)
    probs = [expected[x] for x in support]
    probs[0] += sum(p for x, p in expected.items() if x < -half)
    probs[-1] += sum(p for x, p in expected.items() if x > half)
    _, p_value = stats.chisquare(observed, np.array(probs) * n / sum(probs))
    assert p_value > 0.001


def test_discrete_gaussian_is_integer_and_centred():
    rng = np.random.default_rng(3)
    draws = [discrete_gaussian(40, 9, rng) for _ in range(5000)]
    assert all(isinstance(d, int) for d in draws)
    assert np.mean(draws) == pytest.approx(40, abs=0.2)
    assert np.var(draws) == pytest.approx(9, rel=0.1)


def test_tiny_variance_returns_value():
    rng = np.random.default_rng(0)
    assert all(discrete_gaussian(7, 1e-9, rng) == 7 for _ in range(100))


@pytest.mark.parametrize("variance", [0, -1.0, float("inf")])
def test_bad_variance_rejected(variance):
    with pytest.raises(ValueError):
        discrete_gaussian(0, variance, np.random.default_rng(0))


def test_bernoulli_exp_rate():
    rng = np.random.default_rng(5)
    hits = sum(bernoulli_exp(Fraction(3, 2), rng) for _ in range(20000))
    assert hits / 20000 == pytest.approx(np.exp(-1.5), abs=0.01)


def test_discrete_laplace_symmetric():
    rng = np.random.default_rng(8)
    draws = [discrete_laplace(2, rng) for _ in range(20000)]
    assert np.mean(draws) == pytest.approx(0.0, abs=0.1)
