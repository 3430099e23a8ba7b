"""Shared pytest plumbing: the acceptance verdict registry and its summary lines."""

import re

import pytest

N_CRITERIA = 10
_verdicts: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record a PASS/FAIL for an acceptance criterion, then assert it."""

    def record(n: int, ok: bool, detail: str) -> None:
        _verdicts[n] = (bool(ok), detail)
        print(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    attempted = set()
    for key in ("passed", "failed", "error"):
        for r in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(r, "nodeid", ""))
            if m:
                attempted.add(int(m.group(1)))
    if not attempted:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _verdicts:
            ok, detail = _verdicts[n]
            terminalreporter.write_line(f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}  {detail}")
        elif n in attempted:
            terminalreporter.write_line(f"ACCEPTANCE {n:2d} FAIL  (errored before reaching a verdict)")
