import time

import pytest

_VERDICTS: list[str] = []


class Criterion:
    """Times a numbered acceptance check and records a one-line verdict."""

    def __init__(self, number: int, limit: float | None, capmanager):
        self.number = number
        self.limit = limit
        self.checks: list[tuple[str, bool]] = []
        self._capman = capmanager
        self._t0 = time.perf_counter()

    def check(self, label: str, ok) -> None:
        self.checks.append((label, bool(ok)))

    def finish(self) -> None:
        elapsed = time.perf_counter() - self._t0
        if self.limit is not None:
            self.check(f"runtime {elapsed:.1f}s < {self.limit:g}s", elapsed < self.limit)
        passed = all(ok for _, ok in self.checks)
        detail = "; ".join(f"{label} [{'ok' if ok else 'FAIL'}]" for label, ok in self.checks)
        line = f"criterion {self.number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        with self._capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        failed = [label for label, ok in self.checks if not ok]
        assert not failed, f"criterion {self.number} failed: {failed}"


@pytest.fixture
def criterion(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def make(number: int, limit: float | None = None) -> Criterion:
        return Criterion(number, limit, capman)

    return make


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
