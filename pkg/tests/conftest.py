import pytest

from knlc import cavity
from knlc.cavity import CavitySpec

DRIVE = 1.0


def make_cavity(eta=1.0, length=0.5, rc=0.9):
    return CavitySpec.from_escape_efficiency(rc, eta, length_L=length)


@pytest.fixture(scope="session")
def lossless():
    return make_cavity()


@pytest.fixture(scope="session")
def lossless_critical(lossless):
    return cavity.critical_spec(lossless, DRIVE)


@pytest.fixture(scope="session")
def lossy_critical():
    return cavity.critical_spec(make_cavity(0.9), DRIVE)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def report(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
