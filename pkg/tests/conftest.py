import time
from contextlib import contextmanager

RESULTS: list[tuple[int, str, str, str]] = []


@contextmanager
def criterion(number: int, title: str, time_limit: float | None = None):
    """Record one acceptance criterion as PASS/FAIL and echo a single line."""
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
        elapsed = time.perf_counter() - t0
        if time_limit is not None:
            assert elapsed <= time_limit, f"took {elapsed:.1f}s, limit {time_limit:.0f}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        detail = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"[:160]
        _emit(number, "FAIL", title, f"{detail} ({elapsed:.1f}s)")
        raise
    extra = ", ".join(f"{k}={v}" for k, v in info.items())
    _emit(number, "PASS", title, f"{extra} ({elapsed:.1f}s)".strip())


def _emit(number, status, title, detail):
    line = f"criterion {number:>2} {status}: {title} | {detail}"
    RESULTS.append((number, status, title, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, _, line in sorted(RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(line)
