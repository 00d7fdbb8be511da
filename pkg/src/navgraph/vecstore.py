"""Vector datasets, metrics, distance kernels and dataset file I/O.

File formats (all little-endian):

* ``fvecs``  -- per record: int32 ``d`` then ``d`` float32
* ``ivecs``  -- per record: int32 ``d`` then ``d`` int32
* ``bvecs``  -- per record: int32 ``d`` then ``d`` uint8
* ``raw_f32`` -- 16-byte header (``b"NVGF"``, u32 version=1, u32 n, u32 d)
  followed by ``n * d`` float32
"""

from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from navgraph import _kernels

RAW_MAGIC = b"NVGF"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIII")

FORMATS = ("fvecs", "bvecs", "ivecs", "raw_f32")
_EXTENSIONS = {
    ".fvecs": "fvecs",
    ".bvecs": "bvecs",
    ".ivecs": "ivecs",
    ".f32": "raw_f32",
    ".raw": "raw_f32",
    ".nvgf": "raw_f32",
}


class DatasetFormatError(ValueError):
    """A dataset file does not parse under its declared format."""


class Metric(str, enum.Enum):
    L2 = "l2"
    ANGULAR = "angular"

    @property
    def code(self) -> int:
        return _kernels.L2 if self is Metric.L2 else _kernels.ANGULAR

    @classmethod
    def from_code(cls, code: int) -> "Metric":
        if code == _kernels.L2:
            return cls.L2
        if code == _kernels.ANGULAR:
            return cls.ANGULAR
        raise ValueError(f"unknown metric tag {code}")

    @classmethod
    def parse(cls, value: "Metric | str") -> "Metric":
        if isinstance(value, Metric):
            return value
        v = str(value).lower()
        if v in ("l2", "l2sq", "l2squared", "euclidean"):
            return cls.L2
        if v in ("angular", "cosine"):
            return cls.ANGULAR
        raise ValueError(f"unknown metric {value!r}")


@dataclass(frozen=True)
class VectorSet:
    """A contiguous float32 ``n x d`` dataset tagged with its metric.

    ``dim`` may only be 0 for an empty set loaded from a headerless empty
    file, where the dimension is unrecoverable.
    """

    data: np.ndarray
    metric: Metric = Metric.L2

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"expected a 2-d array, got shape {data.shape}")
        if data.shape[1] < 1 and data.shape[0] > 0:
            raise ValueError("dimension must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        if self.metric is Metric.ANGULAR and data.shape[0]:
            zero = np.flatnonzero(~np.any(data != 0, axis=1))
            if zero.size:
                raise ValueError(
                    f"angular datasets cannot contain zero vectors (row {int(zero[0])})"
                )

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i):
        return self.data[i]

    def with_metric(self, metric) -> "VectorSet":
        return VectorSet(self.data, metric)


def _as_f32_vector(x) -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=np.float32)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def distance(metric, a, b) -> np.float32:
    """Squared L2 or angular (1 - cos) distance with the search kernel."""
    metric = Metric.parse(metric)
    a = _as_f32_vector(a)
    b = _as_f32_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if metric is Metric.ANGULAR and (not a.any() or not b.any()):
        raise ValueError("angular distance is undefined for zero vectors")
    return np.float32(_kernels.pair_distance(metric.code, a, b))


def reference_distance(metric, a, b) -> float:
    """Scalar float64 loop; the oracle the fast kernel is checked against."""
    metric = Metric.parse(metric)
    a = [float(x) for x in np.asarray(a, dtype=np.float32)]
    b = [float(x) for x in np.asarray(b, dtype=np.float32)]
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    if metric is Metric.L2:
        s = 0.0
        for x, y in zip(a, b):
            s += (x - y) * (x - y)
        return s
    ab = aa = bb = 0.0
    for x, y in zip(a, b):
        ab += x * y
        aa += x * x
        bb += y * y
    if aa == 0.0 or bb == 0.0:
        raise ValueError("angular distance is undefined for zero vectors")
    return 1.0 - ab / math.sqrt(aa * bb)


def detect_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    try:
        return _EXTENSIONS[ext]
    except KeyError:
        raise DatasetFormatError(
            f"cannot infer dataset format from {path!r}; pass format= explicitly"
        ) from None


def _parse_vecs(buf: bytes, itemsize: int, dtype, path) -> np.ndarray:
    size = len(buf)
    if size == 0:
        return np.empty((0, 0), dtype=dtype)
    if size < 4:
        raise DatasetFormatError(f"{path}: truncated record header")
    d = int(np.frombuffer(buf, dtype="<i4", count=1)[0])
    if d <= 0:
        raise DatasetFormatError(f"{path}: invalid record dimension {d}")
    rec = 4 + d * itemsize
    if size % rec == 0:
        n = size // rec
        raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, rec)
        dims = raw[:, :4].copy().view("<i4").ravel()
        if np.all(dims == d):
            return raw[:, 4:].copy().view(np.dtype(dtype).newbyteorder("<")).astype(dtype)
    # slow path: locate the first bad record to report it precisely
    pos = 0
    i = 0
    while pos < size:
        if pos + 4 > size:
            raise DatasetFormatError(f"{path}: truncated header in record {i}")
        dd = struct.unpack_from("<i", buf, pos)[0]
        if dd != d:
            raise DatasetFormatError(
                f"{path}: record {i} has dimension {dd}, expected {d}"
            )
        if pos + 4 + dd * itemsize > size:
            raise DatasetFormatError(f"{path}: truncated payload in record {i}")
        pos += 4 + dd * itemsize
        i += 1
    raise DatasetFormatError(f"{path}: malformed file")  # unreachable in practice


def load_vectors(path, format: str | None = None, metric=Metric.L2):
    """Load a dataset file.

    Returns a :class:`VectorSet` for ``fvecs``/``bvecs``/``raw_f32`` and an
    int32 matrix for ``ivecs`` (ground-truth neighbour ids).
    """
    fmt = format or detect_format(path)
    if fmt not in FORMATS:
        raise DatasetFormatError(f"unknown format {fmt!r}")
    with open(path, "rb") as f:
        buf = f.read()
    if fmt == "fvecs":
        return VectorSet(_parse_vecs(buf, 4, np.float32, path), metric)
    if fmt == "bvecs":
        return VectorSet(_parse_vecs(buf, 1, np.uint8, path).astype(np.float32), metric)
    if fmt == "ivecs":
        return _parse_vecs(buf, 4, np.int32, path)
    if len(buf) < _RAW_HEADER.size:
        raise DatasetFormatError(f"{path}: truncated raw_f32 header")
    magic, version, n, d = _RAW_HEADER.unpack_from(buf, 0)
    if magic != RAW_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise DatasetFormatError(f"{path}: unsupported raw_f32 version {version}")
    need = _RAW_HEADER.size + 4 * n * d
    if len(buf) != need:
        raise DatasetFormatError(
            f"{path}: expected {need} bytes for {n}x{d}, found {len(buf)}"
        )
    data = np.frombuffer(buf, dtype="<f4", offset=_RAW_HEADER.size, count=n * d)
    return VectorSet(data.reshape(n, d).astype(np.float32), metric)


def _write_vecs(path, mat: np.ndarray, dtype: str) -> None:
    n, d = mat.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = np.ascontiguousarray(mat, dtype=dtype).view("<i4")
    with open(path, "wb") as f:
        f.write(out.tobytes())


def save_vectors(vs: VectorSet, path, format: str | None = None) -> None:
    fmt = format or detect_format(path)
    if fmt == "fvecs":
        _write_vecs(path, vs.data, "<f4")
    elif fmt == "raw_f32":
        with open(path, "wb") as f:
            f.write(_RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, vs.count, vs.dim))
            f.write(np.ascontiguousarray(vs.data, dtype="<f4").tobytes())
    else:
        raise DatasetFormatError(f"cannot save vectors as {fmt!r}")


def save_ivecs(ids, path) -> None:
    ids = np.asarray(ids, dtype=np.int32)
    if ids.ndim != 2:
        raise ValueError("ivecs expects a 2-d id matrix")
    _write_vecs(path, ids, "<i4")
