import pytest

from dualpilot.simulation import World


@pytest.fixture(scope="session")
def world():
    """The seeded world shipped with the package (loaded once per session)."""
    return World.shipped()


_CRITERIA = {}


def pytest_runtest_logreport(report):
    path, _, name = report.nodeid.partition("::")
    if not path.endswith("test_acceptance.py") or not name.startswith("test_"):
        return
    key = name.split("[")[0][len("test_"):]
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _CRITERIA[key] = False
    elif report.when == "call":
        _CRITERIA.setdefault(key, True)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        num, _, topic = key.partition("_")
        status = "PASS" if _CRITERIA[key] else "FAIL"
        terminalreporter.write_line(f"criterion {int(num):2d} {topic.replace('_', ' ')}: {status}")
