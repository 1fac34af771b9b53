import contextlib

import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``with criterion(6, "overfit benchmark") as note:`` records PASS/FAIL plus ``note["detail"]``."""
    results = request.config.stash.setdefault(_RESULTS, {})

    @contextlib.contextmanager
    def record(number, title):
        note = {"detail": ""}
        try:
            yield note
        except BaseException as exc:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            results[number] = ("FAIL", title, f"{note['detail']} {msg}".strip())
            raise
        else:
            results[number] = ("PASS", title, note["detail"])

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}" + (f" | {detail}" if detail else ""))
