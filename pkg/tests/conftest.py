import pytest

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record ``criterion(n, ok, detail)``; a summary line per criterion is printed at the end."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        store[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        ok, detail = store[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
