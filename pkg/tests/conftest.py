import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def _run(runner):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        return runner()


# The synthetic experiments take minutes; every test that needs a trained
# model shares these session-wide results.

@pytest.fixture(scope="session")
def detection_result():
    from melaseg.experiments import run_detection
    return _run(run_detection)


@pytest.fixture(scope="session")
def segmentation_result():
    from melaseg.experiments import run_segmentation
    return _run(run_segmentation)


@pytest.fixture(scope="session")
def finetune_result():
    from melaseg.experiments import run_finetune
    return _run(run_finetune)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
