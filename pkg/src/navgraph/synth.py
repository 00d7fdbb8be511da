"""Seeded synthetic datasets.

All draws come from numpy's PCG64 bit generator (``numpy.random.default_rng``).
Uniform components are ``Generator.random(dtype=float32)`` on [0, 1); normal
components use numpy's float32 ziggurat sampler.  Data are reproducible for a
fixed seed within :data:`GENERATOR_VERSION` of this package.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from navgraph.vecstore import Metric, VectorSet

GENERATOR_VERSION = 1
# rows drawn per chunk; a fixed schedule keeps the stream independent of memory limits
_CHUNK_ROWS = 65536


class Law(str, enum.Enum):
    UNIFORM = "uniform"
    NORMAL = "normal"

    @classmethod
    def parse(cls, value) -> "Law":
        if isinstance(value, Law):
            return value
        v = str(value).lower()
        if v in ("uniform", "uniformhypercube", "hypercube"):
            return cls.UNIFORM
        if v in ("normal", "iidnormal", "gaussian"):
            return cls.NORMAL
        raise ValueError(f"unknown law {value!r}")


@dataclass(frozen=True)
class SynthSpec:
    n: int
    d: int
    law: Law = Law.NORMAL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "law", Law.parse(self.law))
        if self.n < 1 or self.d < 1:
            raise ValueError(f"n and d must be positive, got n={self.n}, d={self.d}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def generate(spec: SynthSpec, metric=Metric.L2) -> VectorSet:
    """Draw an ``n x d`` float32 dataset following ``spec``."""
    rng = np.random.default_rng(spec.seed)
    out = np.empty((spec.n, spec.d), dtype=np.float32)
    for start in range(0, spec.n, _CHUNK_ROWS):
        block = out[start:start + _CHUNK_ROWS]
        if spec.law is Law.UNIFORM:
            rng.random(out=block, dtype=np.float32)
        else:
            rng.standard_normal(out=block, dtype=np.float32)
    return VectorSet(out, metric)
