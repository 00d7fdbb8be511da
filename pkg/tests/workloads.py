"""Desk-scale datasets for the acceptance suite, with an on-disk index cache.

Building a 10^5-point index takes minutes on one core, so hierarchical
indexes are serialized under the pytest cache directory keyed by every
parameter that affects them.  Flat indexes are always re-derived from the
cached base layer.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass

import navgraph
from navgraph import BuildParams, HierIndex, load_index, save_index
from navgraph.synth import SynthSpec, generate

CACHE_VERSION = 2
N_QUERIES = 1000
QUERY_SEED_OFFSET = 10_000


@dataclass(frozen=True)
class Workload:
    law: str
    n: int
    d: int
    metric: str = "l2"
    seed: int = 1
    M: int = 32
    ef_construction: int = 100

    @property
    def name(self) -> str:
        return f"{self.law}{self.d}-{self.metric}-n{self.n}"

    def data(self):
        return generate(SynthSpec(self.n, self.d, self.law, self.seed), self.metric)

    def queries(self, count: int = N_QUERIES):
        return generate(SynthSpec(count, self.d, self.law, self.seed + QUERY_SEED_OFFSET),
                        self.metric)

    def params(self) -> BuildParams:
        return BuildParams(M=self.M, ef_construction=self.ef_construction, seed=self.seed,
                           metric=self.metric)

    def key(self) -> str:
        blob = json.dumps([asdict(self), CACHE_VERSION, navgraph.__version__], sort_keys=True)
        return f"{self.name}-{hashlib.sha1(blob.encode()).hexdigest()[:12]}"


NORMAL_64 = Workload("normal", 100_000, 64)
NORMAL_16 = Workload("normal", 100_000, 16)
NORMAL_256 = Workload("normal", 100_000, 256)
UNIFORM_4 = Workload("uniform", 100_000, 4)
UNIFORM_64 = Workload("uniform", 100_000, 64)
ANGULAR_16 = Workload("normal", 100_000, 16, metric="angular")
NORMAL_1024 = Workload("normal", 50_000, 1024)
ANGULAR_1024 = Workload("normal", 50_000, 1024, metric="angular")

ALL = (UNIFORM_4, NORMAL_16, ANGULAR_16, NORMAL_64, UNIFORM_64, NORMAL_256,
       NORMAL_1024, ANGULAR_1024)


def default_cache_dir() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(os.path.dirname(here), ".pytest_cache", "d", "navgraph-indexes")


def cached_hier(w: Workload, cache_dir: str | None = None, data=None):
    """Return ``(index, build_seconds)``, building and caching on first use."""
    cache_dir = cache_dir or default_cache_dir()
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, w.key() + ".nvgi")
    meta = path + ".json"
    if os.path.exists(path) and os.path.exists(meta):
        with open(meta) as f:
            build_s = json.load(f)["build_s"]
        idx = load_index(path, kind="hier")
        return idx, build_s
    data = data if data is not None else w.data()
    t0 = time.perf_counter()
    idx = HierIndex.build(data, w.params())
    build_s = time.perf_counter() - t0
    tmp = path + ".tmp"
    save_index(idx, tmp)
    os.replace(tmp, path)
    with open(meta, "w") as f:
        json.dump({"build_s": build_s, "workload": asdict(w)}, f)
    return idx, build_s


if __name__ == "__main__":
    for w in ALL:
        t0 = time.perf_counter()
        idx, secs = cached_hier(w)
        print(f"{w.name}: build {secs:.1f}s (wall {time.perf_counter() - t0:.1f}s)", flush=True)
