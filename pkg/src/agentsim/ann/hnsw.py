"""Hierarchical navigable small-world graph index."""
from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np

from agentsim.ann import _kernels
from agentsim.ann.vectors import Dataset, as_vector
from agentsim.errors import InvalidInputError, StateError

INDEX_MAGIC = b"SAXI"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIQIIIqidq")


@dataclass(eq=False)
class HnswIndex:
    """Layered proximity graph over a dataset; read-only once built.

    ``links[level, node, :counts[level, node]]`` are the node's neighbours
    at that level. Level 0 holds up to ``2 * M`` neighbours per node, upper
    levels up to ``M``.
    """

    data: np.ndarray
    levels: np.ndarray
    links: np.ndarray
    counts: np.ndarray
    entry_point: int
    max_level: int
    M: int
    ef_construction: int
    level_scale: float
    build_seed: int
    repaired_links: int = 0

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def neighbors(self, node: int, level: int = 0) -> List[int]:
        return self.links[level, node, : self.counts[level, node]].tolist()

    def layers(self) -> List[dict]:
        """Adjacency as one ``{node: [neighbours]}`` dict per level."""
        out = []
        for lev in range(self.max_level + 1):
            nodes = np.flatnonzero(self.levels >= lev)
            out.append({int(v): self.neighbors(int(v), lev) for v in nodes})
        return out

    def same_graph(self, other: "HnswIndex") -> bool:
        return (
            self.entry_point == other.entry_point
            and self.max_level == other.max_level
            and np.array_equal(self.levels, other.levels)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.links, other.links)
        )

    def reachable_from_entry(self) -> np.ndarray:
        """Boolean mask of nodes reachable from the entry point at level 0."""
        seen = np.zeros(self.count, dtype=bool)
        seen[self.entry_point] = True
        queue = deque([self.entry_point])
        links0, counts0 = self.links[0], self.counts[0]
        while queue:
            v = queue.popleft()
            for nb in links0[v, : counts0[v]]:
                if not seen[nb]:
                    seen[nb] = True
                    queue.append(int(nb))
        return seen


def draw_levels(count: int, M: int, seed: int) -> np.ndarray:
    """Per-node top level, ``floor(-ln(U) / ln(M))`` with U from a seeded generator."""
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(count)  # (0, 1]
    return np.floor(-np.log(u) / math.log(M)).astype(np.int64)


def _repair_connectivity(index: HnswIndex) -> int:
    # Pruning can, rarely, orphan a node at level 0. Give each unreachable
    # node an in-link from its nearest reachable node that has spare room.
    added = 0
    cap = 2 * index.M
    data64 = index.data.astype(np.float64)
    while True:
        seen = index.reachable_from_entry()
        if seen.all():
            return added
        orphan = int(np.flatnonzero(~seen)[0])
        diff = data64 - data64[orphan]
        d = np.einsum("ij,ij->i", diff, diff)
        d[~seen] = np.inf
        d[index.counts[0] >= cap] = np.inf
        order = np.lexsort((np.arange(index.count), d))
        host = int(order[0])
        if not np.isfinite(d[host]):
            raise StateError("no reachable node has spare level-0 capacity")
        c = index.counts[0, host]
        index.links[0, host, c] = orphan
        index.counts[0, host] = c + 1
        added += 1


def build_index(ds: Dataset, M: int = 16, ef_construction: int = 100, seed: int = 0) -> HnswIndex:
    """Insert every point of ``ds`` in order, seeding level draws with ``seed``."""
    if not isinstance(ds, Dataset):
        ds = Dataset(ds)
    if M < 2:
        raise InvalidInputError(f"M must be >= 2, got {M}")
    if ef_construction < M:
        raise InvalidInputError(f"ef_construction ({ef_construction}) must be >= M ({M})")
    levels = draw_levels(ds.count, M, seed)
    n_levels = int(levels.max()) + 1
    links = np.full((n_levels, ds.count, 2 * M), -1, dtype=np.int64)
    counts = np.zeros((n_levels, ds.count), dtype=np.int64)
    data = ds.vectors
    entry, max_level = _kernels.build(data, levels, M, ef_construction, links, counts)
    index = HnswIndex(
        data=data,
        levels=levels,
        links=links,
        counts=counts,
        entry_point=int(entry),
        max_level=int(max_level),
        M=M,
        ef_construction=ef_construction,
        level_scale=1.0 / math.log(M),
        build_seed=seed,
    )
    index.repaired_links = _repair_connectivity(index)
    return index


def save_index(index: HnswIndex, path: Union[str, Path]) -> None:
    """Dump the graph (not the vectors) as a versioned little-endian blob."""
    n_levels = index.links.shape[0]
    header = _INDEX_HEADER.pack(
        INDEX_MAGIC, INDEX_VERSION, index.count, index.dim, index.M, n_levels,
        index.entry_point, index.ef_construction, index.level_scale, index.build_seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<q", index.max_level))
        fh.write(struct.pack("<q", index.repaired_links))
        fh.write(index.levels.astype("<i8").tobytes())
        fh.write(index.counts.astype("<i8").tobytes())
        fh.write(index.links.astype("<i8").tobytes())


def load_index(path: Union[str, Path], ds: Dataset) -> HnswIndex:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"index file not found: {path}")
    raw = path.read_bytes()
    (magic, version, count, dim, M, n_levels, entry, efc, level_scale,
     seed) = _INDEX_HEADER.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise InvalidInputError(f"{path}: unsupported version {version}")
    if count != ds.count or dim != ds.dim:
        raise InvalidInputError(
            f"{path}: index is for {count}x{dim} data, dataset is {ds.count}x{ds.dim}"
        )
    off = _INDEX_HEADER.size
    (max_level,) = struct.unpack_from("<q", raw, off)
    (repaired,) = struct.unpack_from("<q", raw, off + 8)
    off += 16

    def take(n, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<i8", count=n, offset=off).reshape(shape)
        off += n * 8
        return arr.astype(np.int64)

    levels = take(count, (count,))
    counts = take(n_levels * count, (n_levels, count))
    links = take(n_levels * count * 2 * M, (n_levels, count, 2 * M))
    return HnswIndex(
        data=ds.vectors, levels=levels, links=links, counts=counts,
        entry_point=entry, max_level=max_level, M=M, ef_construction=efc,
        level_scale=level_scale, build_seed=seed, repaired_links=repaired,
    )


def descend_to_base(index: HnswIndex, q) -> tuple:
    """Greedy descent through the upper levels; returns ``(node, distance)``."""
    q = as_vector(q, dim=index.dim)
    node, d = _kernels.descend(index.data, index.links, index.counts,
                               index.entry_point, index.max_level, q, 0)
    return int(node), float(d)
