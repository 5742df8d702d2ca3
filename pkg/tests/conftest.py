import logging

import numpy as np
import pytest

from pairlot.data import TrialDataset

logging.getLogger("pairlot").setLevel(logging.ERROR)


def oracle_dataset() -> TrialDataset:
    """Hand-checkable n=4, tau=2 example: (A, T, Y) per subject."""
    nan = np.nan
    return TrialDataset(
        covariates=np.zeros((4, 0)),
        arm=[1, 1, 0, 0],
        ice_time=[2, 0, 1, 2],
        outcomes=[[1, 2, 3], [5, nan, nan], [2, 4, nan], [0, 1, 2]],
    )


def random_dataset(rng: np.random.Generator, n=None, tau=None, d=None) -> TrialDataset:
    """Valid dataset with random ICE times, both arms present and masked outcomes."""
    n = int(rng.integers(6, 201)) if n is None else n
    tau = int(rng.integers(1, 7)) if tau is None else tau
    d = int(rng.integers(0, 4)) if d is None else d
    n_treated = int(rng.integers(max(2, n // 10), n - max(2, n // 10) + 1))
    arm = np.zeros(n, dtype=int)
    arm[rng.permutation(n)[:n_treated]] = 1
    # mass at tau plus a spread of early ICE times
    T = np.where(rng.random(n) < 0.4, tau, rng.integers(0, tau + 1, n))
    Y = rng.normal(size=(n, tau + 1)) + rng.normal(size=(n, 1))
    Y = np.where(np.arange(tau + 1)[None, :] <= T[:, None], Y, np.nan)
    return TrialDataset(rng.normal(size=(n, d)), arm, T, Y)


@pytest.fixture
def oracle():
    return oracle_dataset()


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abc")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
