import pytest

_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one (criterion, passed, detail) line per acceptance check."""
    return request.config.stash.setdefault(_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_KEY, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(rows):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
