import numpy as np
import pytest

from vfboost.boost import Dataset

# name -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[name] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=_criterion_order):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(
            f"{name:<28} {'PASS' if passed else 'FAIL'}  {detail}")


def _criterion_order(name: str):
    head = name.split()[0]
    digits = "".join(ch for ch in head if ch.isdigit())
    return (int(digits) if digits else 0, name)


def random_dataset(seed: int, n: int, d: int, categorical: bool = False
                   ) -> Dataset:
    """Small labelled dataset with signal in every column."""
    gen = np.random.default_rng(seed)
    labels = (gen.random(n) < 0.5).astype(int)
    features = gen.standard_normal((n, d)) + 0.8 * labels[:, None]
    if categorical:
        features = np.round(features * 2) / 2
    return Dataset(features, labels)


@pytest.fixture
def tiny_dataset():
    return random_dataset(0, 40, 3)
