import warnings

import numpy as np
import pytest

from xaisplit.data import train_test
from xaisplit.nn import ExtractorConfig
from xaisplit.skewtrain import SkewnessSpec, TrainConfig, train_pipeline
from xaisplit.xai import DegenerateImportanceWarning


@pytest.fixture(scope="session")
def toy_data():
    return train_test("radial", 512, 128, seed=0)


@pytest.fixture(scope="session")
def toy_result(toy_data):
    """A briefly trained split model: enough for plumbing tests, not for quality claims."""
    train, test = toy_data
    cfg = TrainConfig(epochs=2, warmup_epochs=2, ref_max_epochs=3, eval_ig_steps=8, ig_steps=8, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateImportanceWarning)
        return train_pipeline(train, test, ExtractorConfig(), SkewnessSpec(), cfg)


@pytest.fixture(scope="session")
def toy_model(toy_result):
    return toy_result.model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
