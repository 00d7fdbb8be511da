import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from navgraph import BuildParams, HierIndex, VectorSet  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def index_cache_dir(request):
    return str(request.config.cache.mkdir("navgraph-indexes"))


@pytest.fixture(scope="session")
def small_normal():
    """2000 x 16 IID normal points with 100 queries."""
    r = np.random.default_rng(7)
    data = VectorSet(r.standard_normal((2000, 16), dtype=np.float32))
    queries = r.standard_normal((100, 16), dtype=np.float32)
    return data, queries


@pytest.fixture(scope="session")
def small_hier(small_normal):
    data, _ = small_normal
    return HierIndex.build(data, BuildParams(M=16, ef_construction=100, seed=3))


def brute_force_oracle(data, queries, k, metric="l2"):
    """Independent float64 full sort with id tie-break."""
    x = np.asarray(data, dtype=np.float64)
    out = []
    for q in np.atleast_2d(np.asarray(queries, dtype=np.float64)):
        if metric == "l2":
            d = ((x - q) ** 2).sum(axis=1)
        else:
            d = 1.0 - (x @ q) / (np.linalg.norm(x, axis=1) * np.linalg.norm(q))
        order = sorted(range(len(x)), key=lambda i: (d[i], i))[:k]
        out.append(order)
    return np.asarray(out)


_ACCEPTANCE = pytest.StashKey[dict]()


class AcceptanceLog:
    """Per-criterion check results, printed as one line each at the end of the run."""

    def __init__(self, store: dict):
        self.store = store

    def check(self, criterion: int, name: str, ok: bool, detail: str = "") -> bool:
        self.store.setdefault(criterion, []).append((name, bool(ok), detail))
        return bool(ok)

    def failures(self, criterion: int) -> list[str]:
        return [f"{n}: {d}" for n, ok, d in self.store.get(criterion, []) if not ok]


@pytest.fixture(scope="session")
def acceptance(request):
    return AcceptanceLog(request.config.stash.setdefault(_ACCEPTANCE, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(store):
        checks = store[crit]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {crit}: {status}")
        for name, ok, detail in checks:
            mark = "ok " if ok else "BAD"
            terminalreporter.write_line(f"    [{mark}] {name}: {detail}")
