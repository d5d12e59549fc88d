"""Vector datasets, the distance metric, the exact oracle and the SAXV file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from agentsim.errors import InvalidInputError
from agentsim.ann import _kernels

SAXV_MAGIC = b"SAXV"
SAXV_VERSION = 1
_SAXV_HEADER = struct.Struct("<4sIIQ")


def as_vector(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float32 array."""
    v = np.ascontiguousarray(values, dtype=np.float32)
    if v.ndim != 1 or v.shape[0] == 0:
        raise InvalidInputError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise InvalidInputError(f"dimension mismatch: {v.shape[0]} != {dim}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("vector has non-finite entries")
    return v


@dataclass(frozen=True)
class Dataset:
    """An immutable ``(count, dim)`` float32 matrix of vectors."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidInputError(f"dataset must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("dataset has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> np.ndarray:
        return self.vectors[i]


def gaussian_dataset(count: int, dim: int, seed: int, normalize: bool = False) -> Dataset:
    """Draw ``count`` i.i.d. standard-normal vectors from a seeded generator."""
    if count < 1 or dim < 1:
        raise InvalidInputError("count and dim must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((count, dim), dtype=np.float32)
    if normalize:
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    return Dataset(x)


def distance(a, b) -> float:
    """Squared Euclidean distance, accumulated in float64."""
    a = as_vector(a)
    b = as_vector(b, dim=a.shape[0])
    return float(_kernels.sqdist(a, b))


def brute_force_topk(ds: Dataset, q, k: int) -> List[Tuple[int, float]]:
    """Exact k nearest neighbours of ``q`` by full scan.

    Ties are broken by the smaller id. This is the oracle every recall number
    is measured against, so it deliberately shares no code with the graph
    search.
    """
    if not 1 <= k <= ds.count:
        raise InvalidInputError(f"k={k} out of range [1, {ds.count}]")
    q = as_vector(q, dim=ds.dim).astype(np.float64)
    diff = ds.vectors.astype(np.float64) - q
    d = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((np.arange(ds.count), d))[:k]
    return [(int(i), float(d[i])) for i in order]


def recall(result_ids, oracle_ids) -> float:
    """Fraction of ``oracle_ids`` present in ``result_ids``."""
    result_ids = list(result_ids)
    oracle_ids = list(oracle_ids)
    if len(result_ids) != len(oracle_ids):
        raise InvalidInputError("result and oracle lists must have equal k")
    if not oracle_ids:
        raise InvalidInputError("k must be positive")
    return len(set(result_ids) & set(oracle_ids)) / len(oracle_ids)


def write_saxv(path: Union[str, Path], ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(_SAXV_HEADER.pack(SAXV_MAGIC, SAXV_VERSION, ds.dim, ds.count))
        fh.write(ds.vectors.astype("<f4", copy=False).tobytes(order="C"))


def read_saxv(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _SAXV_HEADER.size:
        raise InvalidInputError(f"{path}: truncated header")
    magic, version, dim, count = _SAXV_HEADER.unpack_from(raw)
    if magic != SAXV_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    if version != SAXV_VERSION:
        raise InvalidInputError(f"{path}: unsupported version {version}")
    body = raw[_SAXV_HEADER.size:]
    if len(body) != count * dim * 4:
        raise InvalidInputError(f"{path}: body holds {len(body)} bytes, expected {count * dim * 4}")
    x = np.frombuffer(body, dtype="<f4").reshape(count, dim)
    return Dataset(x.astype(np.float32))
