import copy

import pytest

TINY = {
    "version": 1,
    "design": {"W": 6.0, "L": 80.0, "theta": 45.0, "b1": 2.0, "b2": 2.0, "h1": 1.0, "h2": 2.0},
    "voxel": 0.5,
    "environments": [{"name": "ipa", "fluid": "ipa"}, {"name": "water", "fluid": "water"}],
    "head": {"dims": [12.0, 8.0, 6.0]},
    "field": {"frequencies": [5.0, 50.0, 100.0, 200.0, 400.0, 800.0]},
    "seed": 3,
}


@pytest.fixture
def tiny_dict():
    """A small two-environment design that solves in well under a minute."""
    return copy.deepcopy(TINY)


@pytest.fixture(scope="session")
def shared_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("deformation-cache")


ACCEPTANCE_LINES = {}


def record_acceptance(number: int, ok: bool, detail: str) -> str:
    """Store one pass/fail line for the end-of-run acceptance summary."""
    line = f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
