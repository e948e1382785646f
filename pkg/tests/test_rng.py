import numpy as np
import pytest

from vfboost import rng


def test_same_key_same_draws():
    a = rng.stream(3, "noise", 1, 2).standard_normal(5)
    b = rng.stream(3, "noise", 1, 2).standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_creation_order_irrelevant():
    first = rng.stream(0, "coef", 1).random()
    rng.stream(0, "coef", 2).random(100)
    assert rng.stream(0, "coef", 1).random() == first


@pytest.mark.parametrize("other", [(4, "noise", 1, 2), (3, "coef", 1, 2),
                                   (3, "noise", 2, 1), (3, "noise", 1)])
def test_distinct_keys_differ(other):
    base = rng.stream(3, "noise", 1, 2).random(4)
    assert not np.array_equal(base, rng.stream(*other).random(4))


def test_distinct_streams_uncorrelated():
    a = rng.stream(0, "mc", 0).standard_normal(10**5)
    b = rng.stream(0, "mc", 1).standard_normal(10**5)
    assert abs(np.corrcoef(a, b)[0, 1]) < 5 / np.sqrt(10**5)


def test_errors():
    with pytest.raises(ValueError):
        rng.stream(0, "unknown")
    with pytest.raises(ValueError):
        rng.stream(-1, "noise")
