"""Shared fixtures: small classification problems and the label-skew surrogate."""

import pytest

from fedsim import data


@pytest.fixture(scope="session")
def surrogate_factory():
    """Memoized builder of (dataset, partitions) label-skew surrogates.

    Keyed by every generation parameter so independent tests can share the
    heavier instances.
    """
    cache = {}

    def build(seed, n_digits=2, n=5000, u=10, classes=10, separation=6.0, devices=100):
        key = (seed, n_digits, n, u, classes, separation, devices)
        if key not in cache:
            ds = data.synth_classification(n, u, classes, separation, seed=seed)
            parts = data.partition_label_skew(ds, devices, n_digits, seed=seed)
            cache[key] = (ds, parts)
        return cache[key]

    return build


@pytest.fixture
def tiny_dataset():
    """A 60-sample, 3-class, well-separated problem for fast exact checks."""
    return data.synth_classification(60, 4, 3, 6.0, seed=7)
