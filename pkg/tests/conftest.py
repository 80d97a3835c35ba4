import numpy as np
import pytest

from helpers import LinearSoftmax, tiny_model


@pytest.fixture
def linear_model():
    return LinearSoftmax()


@pytest.fixture
def model64():
    return tiny_model(0, np.float64)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c.split(".")[0])):
        status, title, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{status}] criterion {cid}: {title} -- {detail}")
