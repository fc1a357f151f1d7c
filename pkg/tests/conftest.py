import pytest

from weakindex.thesaurus import bundled_descriptor


@pytest.fixture(scope="session")
def ad():
    return bundled_descriptor("ad")


@pytest.fixture(scope="session")
def dmd():
    return bundled_descriptor("dmd")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
