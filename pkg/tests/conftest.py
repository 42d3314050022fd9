import numpy as np
import pytest

from cld.core import ContextBatch, HistorySpec
from cld.scenarios import Horizon, build_dataset, generate_scenarios


@pytest.fixture(scope="session")
def small_world():
    """A handful of scenarios with demonstrations and a windowed dataset."""
    hz = Horizon()
    scns, demos = generate_scenarios("mixed", 6, seed=11, horizon=hz)
    ds = build_dataset(scns, demos, hz, HistorySpec(), stride=20)
    return scns, demos, ds, hz


@pytest.fixture
def tiny_contexts(small_world):
    ds = small_world[2]
    return ds.contexts.take(np.arange(3))


def random_contexts(rng, B, H=10, M=4, crop=32) -> ContextBatch:
    hist = rng.normal(size=(B, M + 1, H, 4))
    mask = np.ones((B, M + 1), bool)
    mask[:, -1] = False
    hist[~mask] = 0.0
    ego = np.zeros((B, 4))
    ego[:, 2] = rng.uniform(3, 9, B)
    return ContextBatch(rng.random((B, 1, crop, crop)), hist, mask, ego)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(n: int, ok: bool, detail: str):
        request.config.stash.setdefault(_ACCEPTANCE, []).append((n, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash.get(_ACCEPTANCE, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
