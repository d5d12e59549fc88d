"""Batch ordering: first-come-first-serve or hierarchical priority levels.

The priority policy discretises three per-sequence metrics (retrievals
done, total waiting time, context length) into ``G`` levels using
thresholds spread evenly over the waiting set's range, puts each sequence
at the highest level where any metric strictly exceeds its threshold, and
serves levels top-down, longest current wait first within a level.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence

from agentsim.errors import ConfigError

METRICS = ("R", "W", "C")


@dataclass(frozen=True)
class SchedulerPolicy:
    kind: str = "fcfs"
    levels: int = 1

    def __post_init__(self):
        if self.kind not in ("fcfs", "priority"):
            raise ConfigError(f"unknown policy {self.kind!r}")
        if self.levels < 1:
            raise ConfigError("priority levels must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "SchedulerPolicy":
        """Accepts ``"fcfs"`` or ``"priority:<G>"``."""
        text = text.strip().lower()
        if text == "fcfs":
            return cls("fcfs")
        name, _, g = text.partition(":")
        if name == "priority" and g.isdigit():
            return cls("priority", int(g))
        raise ConfigError(f"policy must be 'fcfs' or 'priority:<G>', got {text!r}")

    def __str__(self) -> str:
        return "fcfs" if self.kind == "fcfs" else f"priority:{self.levels}"


@dataclass(frozen=True)
class PriorityInputs:
    request_id: int
    R: float
    W: float
    C: float
    W_cur: float


ThresholdTable = Dict[str, List[float]]


def compute_thresholds(values: Mapping[str, Sequence[float]], G: int) -> ThresholdTable:
    table = {}
    for m, vals in values.items():
        lo, hi = min(vals), max(vals)
        table[m] = [lo + (k / G) * (hi - lo) for k in range(G)]
    return table


def assign_level(inp: PriorityInputs, table: ThresholdTable, G: int) -> int:
    for j in range(G - 1, -1, -1):
        if inp.R > table["R"][j] or inp.W > table["W"][j] or inp.C > table["C"][j]:
            return j
    return 0


def priority_inputs(seq, t_now: float) -> PriorityInputs:
    return PriorityInputs(
        request_id=seq.request_id,
        R=seq.r_i,
        W=t_now - seq.t_arr_initial,
        C=seq.context_len,
        W_cur=t_now - seq.t_arr_current,
    )


def order_batch(waiting: Sequence, policy: SchedulerPolicy, t_now: float) -> List:
    """Order waiting sequences for admission. Returns a permutation of ``waiting``."""
    if policy.kind == "fcfs":
        return sorted(waiting, key=lambda s: (s.t_arr_current, s.request_id))
    if not waiting:
        return []
    G = policy.levels
    inputs = [priority_inputs(s, t_now) for s in waiting]
    table = compute_thresholds({m: [getattr(p, m) for p in inputs] for m in METRICS}, G)
    keyed = [
        (-assign_level(p, table, G), -p.W_cur, p.request_id, i)
        for i, p in enumerate(inputs)
    ]
    keyed.sort()
    return [waiting[i] for *_, i in keyed]
