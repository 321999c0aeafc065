import pytest

VERDICTS = pytest.StashKey[dict]()
CRITERIA = range(1, 11)


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line, then assert it."""
    def record(number: int, ok: bool, detail: str):
        request.config.stash[VERDICTS][number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        if n not in verdicts:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN  (deselected, or errored before a verdict)")
            continue
        ok, detail = verdicts[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
