import os

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE: list[tuple[str, str, str]] = []


@pytest.fixture
def acceptance():
    """Record one line per acceptance criterion for the terminal summary."""

    def record(name: str, passed: bool, detail: str = "", advisory: bool = False):
        status = "PASS" if passed else ("ADVISORY-FAIL" if advisory else "FAIL")
        _ACCEPTANCE.append((status, name, detail))
        print(f"[acceptance] {status}: {name} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{status:13s} {name}  {detail}")
