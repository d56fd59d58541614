"""Shared fixtures: tiny trained victims used across attack and harness tests,
plus the acceptance-criteria verdict summary printed after the run."""

import numpy as np
import pytest

from fsalab.models import Dataset, train
from fsalab.numerics import RandomStream

_criterion_verdicts = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Collect one acceptance-criterion verdict for the end-of-run summary."""
    _criterion_verdicts.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criterion_verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_criterion_verdicts):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict} — {detail}")


def _bright_dark_dataset(seed=0, n_per_class=25, shape=(8, 8, 3)):
    """Two trivially separable classes (dark vs bright), small and fast."""
    gen = RandomStream(seed).generator()
    n = 2 * n_per_class
    images = np.empty((n,) + shape)
    images[:n_per_class] = gen.uniform(0.0, 0.3, (n_per_class,) + shape)
    images[n_per_class:] = gen.uniform(0.7, 1.0, (n_per_class,) + shape)
    labels = np.repeat([0, 1], n_per_class)
    split = np.where(np.arange(n) % 5 == 4, "eval", "train")
    perm = gen.permutation(n)
    return Dataset(images[perm], labels[perm], split, num_classes=2)


@pytest.fixture(scope="session")
def toy_data():
    return _bright_dark_dataset()


@pytest.fixture(scope="session")
def toy_linear(toy_data):
    return train(toy_data, "linear_softmax", seed=41, epochs=10, learning_rate=0.5)


@pytest.fixture(scope="session")
def toy_cnn(toy_data):
    return train(toy_data, "cnn_small", seed=42, epochs=8, learning_rate=0.05)
