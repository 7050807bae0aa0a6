import pytest

from rfreadout.harness import load_preset

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def calib_cfg():
    return load_preset("calibrated")


@pytest.fixture(scope="session")
def calib_system(calib_cfg):
    return calib_cfg.readout()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
