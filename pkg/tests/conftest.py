"""Shared toy training runs: each (variant, seed) is trained at most once per session."""
import time

import pytest

from darlab.router import RouterConfig
from darlab.train import TrainConfig, train

VARIANTS = {
    "standard": RouterConfig("standard"),
    "dar-static": RouterConfig("dar", "static", 4),
    "dar-dynamic": RouterConfig("dar", "dynamic", 4),
}
SEEDS = (0, 1, 2)
TOY_STEPS = 2000


class ToyRuns:
    def __init__(self):
        self._runs = {}
        self.seconds = {}

    def get(self, variant: str, seed: int):
        key = (variant, seed)
        if key not in self._runs:
            t0 = time.perf_counter()
            self._runs[key] = train(TrainConfig(router=VARIANTS[variant], steps=TOY_STEPS, seed=seed))
            self.seconds[key] = time.perf_counter() - t0
        return self._runs[key]


@pytest.fixture(scope="session")
def toy_runs():
    return ToyRuns()


# -- acceptance summary: one line per criterion ----------------------------------------------
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(n: int, passed: bool, detail: str) -> bool:
    CRITERIA[n] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
