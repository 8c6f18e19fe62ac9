import numpy as np
import pytest

from mixalign.data import make_split


@pytest.fixture(scope="session")
def tiny_split():
    """Small real split: 5 training domains x 20 samples, 2 held-out domains."""
    return make_split(n_per_domain=20, seed=0)


TINY = dict(widths=(4, 8, 8), cbam_reduction=4, batch_size=16, random_state=0)


@pytest.fixture
def tiny_params():
    return dict(TINY)


def same_arrays(a: dict, b: dict) -> bool:
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


def tiny_config(epochs=2, seed=0):
    from mixalign.config import TrainConfig

    cfg = TrainConfig()
    cfg.run.seed = seed
    cfg.run.epochs = epochs
    cfg.run.batch_size = 16
    cfg.model.widths = (4, 8, 8)
    cfg.cbam.reduction = 4
    cfg.data.n_per_domain = 20
    return cfg


# -- acceptance report: one line per criterion at the end of the session --
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}")
