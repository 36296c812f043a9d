"""Collects acceptance verdicts and prints them as one PASS/FAIL line each."""

_VERDICTS: dict[int, tuple[bool, str, float]] = {}


def record(criterion: int, ok: bool, detail: str, seconds: float) -> None:
    _VERDICTS[criterion] = (bool(ok), detail, seconds)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail, sec = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({sec:.1f}s)  {detail}")
