"""Resumable graph search with relative-quality tracing and maturity exit.

Each expansion step pops the closest unexpanded candidate, visits its
unvisited neighbours and records how good the best newly found point is
relative to the current result list::

    rq = (d_new - d_best) / (d_worst - d_best)

An exponential moving average of ``rq`` climbing past ``tau`` marks the
point where further exploration stops paying off (the *maturity* step).
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from agentsim.ann import _kernels
from agentsim.ann.hnsw import HnswIndex, descend_to_base
from agentsim.ann.vectors import as_vector
from agentsim.errors import InvalidInputError, StateError

DEFAULT_TAU = 0.9
DEFAULT_WINDOW = 500


def rq(d_t: float, d_best: float, d_worst: float) -> float:
    """Relative quality of a new candidate; 1.0 when the list has no spread."""
    if d_worst == d_best:
        return 1.0
    return (d_t - d_best) / (d_worst - d_best)


def ema_alpha(window: int) -> float:
    if window < 1:
        raise InvalidInputError(f"window must be >= 1, got {window}")
    return 2.0 / (window + 1)


def ema_update(prev: Optional[float], x: float, window: int) -> float:
    alpha = ema_alpha(window)
    if prev is None:
        return x
    return alpha * x + (1.0 - alpha) * prev


@dataclass(frozen=True)
class StepRecord:
    t: int
    d_t: float
    d_best: float
    d_worst: float
    rq: float
    ema: float
    cumulative_visited: int


def maturity_point(records: Sequence[StepRecord], tau: float) -> Optional[int]:
    """Step number of the first record whose EMA reaches ``tau``."""
    for rec in records:
        if rec.ema >= tau:
            return rec.t
    return None


class SearchState:
    """A level-0 beam search that can be advanced one expansion at a time.

    Args:
        index: the graph to search.
        q: query vector.
        ef: bound on the result list.
        k: number of results requested.
        window: EMA window for the maturity signal.
    """

    def __init__(self, index: HnswIndex, q, ef: int, k: int, window: int = DEFAULT_WINDOW):
        if not 1 <= k <= ef:
            raise InvalidInputError(f"need ef >= k >= 1, got ef={ef}, k={k}")
        if k > index.count:
            raise InvalidInputError(f"k={k} exceeds index size {index.count}")
        self.index = index
        self.query = as_vector(q, dim=index.dim)
        self.ef = ef
        self.k = k
        self.window = window
        self._alpha = ema_alpha(window)

        start, dstart = descend_to_base(index, self.query)
        self.candidates: List[Tuple[float, int]] = [(dstart, start)]
        # max-heap via negation; the root is the worst (distance, id)
        self.results: List[Tuple[float, int]] = [(-dstart, -start)]
        self.visited = {start}
        self.d_best = dstart
        self.t = 0
        self.ema: Optional[float] = None
        self.finished = index.count == 1

    @property
    def d_worst(self) -> float:
        return -self.results[0][0]

    def _results_full(self) -> bool:
        return len(self.results) >= self.ef

    def _beats_worst(self, d: float, node: int) -> bool:
        wd, wi = self.results[0]
        return (d, node) < (-wd, -wi)

    def step(self) -> Optional[StepRecord]:
        """Expand one candidate. Returns None once the search stops naturally."""
        if self.finished:
            raise StateError("search already finished")
        if not self.candidates:
            self.finished = True
            return None
        dc, c = self.candidates[0]
        if self._results_full() and dc >= self.d_worst:
            self.finished = True
            return None
        heapq.heappop(self.candidates)

        data = self.index.data
        best_new = None
        for nb in self.index.neighbors(c, 0):
            if nb in self.visited:
                continue
            self.visited.add(nb)
            d = float(_kernels.sqdist(data[nb], self.query))
            if best_new is None or d < best_new:
                best_new = d
            heapq.heappush(self.candidates, (d, nb))
            if not self._results_full() or self._beats_worst(d, nb):
                heapq.heappush(self.results, (-d, -nb))
                self.d_best = min(self.d_best, d)
                if len(self.results) > self.ef:
                    heapq.heappop(self.results)

        d_worst = self.d_worst
        d_t = d_worst if best_new is None else best_new
        r = rq(d_t, self.d_best, d_worst)
        self.ema = r if self.ema is None else self._alpha * r + (1.0 - self._alpha) * self.ema
        self.t += 1
        return StepRecord(self.t, d_t, self.d_best, d_worst, r, self.ema, len(self.visited))

    def topk(self, k: Optional[int] = None) -> List[Tuple[int, float]]:
        k = self.k if k is None else k
        ordered = sorted((-d, -i) for d, i in self.results)
        return [(i, d) for d, i in ordered[:k]]


def search_init(index: HnswIndex, q, ef: int, k: int, window: int = DEFAULT_WINDOW) -> SearchState:
    return SearchState(index, q, ef, k, window)


def search_step(state: SearchState) -> Optional[StepRecord]:
    return state.step()


_RECORD_FIELDS = ("d_t", "d_best", "d_worst", "rq", "ema", "cumulative_visited")


@dataclass
class SearchTrace:
    """Per-step trace of one search, stored column-wise."""

    columns: dict
    natural_stop_step: int
    maturity_step: Optional[int]
    final_topk: List[Tuple[int, float]]
    stopped_naturally: bool = True
    _records: Optional[List[StepRecord]] = field(default=None, repr=False)

    @property
    def records(self) -> List[StepRecord]:
        if self._records is None:
            c = self.columns
            self._records = [
                StepRecord(t + 1, float(c["d_t"][t]), float(c["d_best"][t]), float(c["d_worst"][t]),
                           float(c["rq"][t]), float(c["ema"][t]), int(c["cumulative_visited"][t]))
                for t in range(len(c["ema"]))
            ]
        return self._records

    @property
    def ema(self) -> np.ndarray:
        return self.columns["ema"]


def _run(index: HnswIndex, q, ef: int, k: int, window: int, max_steps: int):
    if not 1 <= k <= ef:
        raise InvalidInputError(f"need ef >= k >= 1, got ef={ef}, k={k}")
    if k > index.count:
        raise InvalidInputError(f"k={k} exceeds index size {index.count}")
    q = as_vector(q, dim=index.dim)
    start, dstart = descend_to_base(index, q)
    n = index.count
    cols = {name: np.empty(n, dtype=np.float64) for name in _RECORD_FIELDS[:-1]}
    cols["cumulative_visited"] = np.empty(n, dtype=np.int64)
    steps, finished, rd, ri = _kernels.search_trace(
        index.data, index.links[0], index.counts[0], start, dstart, q, ef, max_steps,
        ema_alpha(window), cols["d_t"], cols["d_best"], cols["d_worst"], cols["rq"],
        cols["ema"], cols["cumulative_visited"],
    )
    cols = {name: col[:steps].copy() for name, col in cols.items()}
    topk = [(int(i), float(d)) for d, i in zip(rd[:k], ri[:k])]
    return cols, int(steps), bool(finished), topk


def search_natural(index: HnswIndex, q, ef: int, k: int, tau: float = DEFAULT_TAU,
                   window: int = DEFAULT_WINDOW) -> SearchTrace:
    """Run to the natural stop and locate the maturity step along the way."""
    cols, steps, finished, topk = _run(index, q, ef, k, window, index.count + 1)
    hits = np.flatnonzero(cols["ema"] >= tau)
    maturity = int(hits[0]) + 1 if hits.size else None
    return SearchTrace(cols, steps, maturity, topk, finished)


def results_at_step(index: HnswIndex, q, ef: int, k: int, t_cut: int,
                    natural_stop_step: Optional[int] = None,
                    window: int = DEFAULT_WINDOW) -> List[Tuple[int, float]]:
    """Top-k as it stood after ``t_cut`` steps, by replaying the search."""
    if t_cut < 0 or (natural_stop_step is not None and t_cut > natural_stop_step):
        raise InvalidInputError(f"t_cut={t_cut} outside [0, {natural_stop_step}]")
    _, steps, _, topk = _run(index, q, ef, k, window, t_cut)
    if steps < t_cut:
        raise InvalidInputError(f"t_cut={t_cut} exceeds the natural stop at step {steps}")
    return topk
