"""Run summaries, latency percentiles and baseline-vs-candidate ratio tables."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, asdict
from typing import Dict, Mapping, Sequence, Union

from agentsim.errors import InvalidInputError


@dataclass(frozen=True)
class MetricsSummary:
    requests_completed: int
    duration: float
    throughput: float
    token_throughput: float
    mean_latency: float
    p50: float
    p99: float
    prefix_hit_rate: float
    pending_ratio: float
    stall_ratio: float
    mean_retrieval_count: float
    mean_retrieval_latency: float
    early_stop_fraction: float
    mean_recall: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# +1 higher is better, -1 lower is better, 0 informational
DIRECTION = {
    "requests_completed": 1,
    "duration": -1,
    "throughput": 1,
    "token_throughput": 1,
    "mean_latency": -1,
    "p50": -1,
    "p99": -1,
    "prefix_hit_rate": 1,
    "pending_ratio": -1,
    "stall_ratio": -1,
    "mean_retrieval_count": -1,
    "mean_retrieval_latency": -1,
    "early_stop_fraction": 0,
    "mean_recall": 1,
}


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile."""
    if len(values) == 0:
        raise InvalidInputError("percentile of an empty list")
    if not 0 <= p <= 100:
        raise InvalidInputError(f"p must be in [0, 100], got {p}")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100 * len(ordered)))
    return ordered[rank - 1]


def pending_ratio(initiated: int, completed: int) -> float:
    if completed > initiated:
        raise InvalidInputError("completed exceeds initiated")
    if initiated == 0:
        return 0.0
    return (initiated - completed) / initiated


def mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if len(values) else 0.0


def _as_dict(s: Union[MetricsSummary, Mapping]) -> dict:
    return s.to_dict() if isinstance(s, MetricsSummary) else dict(s)


def compare_report(baseline, candidate) -> Dict[str, dict]:
    """Per-metric ``candidate / baseline`` ratios.

    A zero baseline gives ratio 1.0 when the candidate is also zero and
    ``None`` otherwise.
    """
    b, c = _as_dict(baseline), _as_dict(candidate)
    if set(b) != set(c):
        raise InvalidInputError(f"schema mismatch: {sorted(set(b) ^ set(c))}")
    out = {}
    for name in b:
        bv, cv = b[name], c[name]
        if not isinstance(bv, (int, float)) or not isinstance(cv, (int, float)):
            raise InvalidInputError(f"metric {name!r} is not numeric")
        if bv == 0:
            ratio = 1.0 if cv == 0 else None
        else:
            ratio = cv / bv
        direction = DIRECTION.get(name, 0)
        better = None
        if ratio is not None and direction:
            better = ratio > 1 if direction > 0 else ratio < 1
        out[name] = {
            "baseline": bv,
            "candidate": cv,
            "ratio": ratio,
            "direction": {1: "higher", -1: "lower", 0: "neutral"}[direction],
            "improved": better,
        }
    return out


def format_report(table: Mapping[str, dict]) -> str:
    lines = [f"{'metric':<24}{'baseline':>14}{'candidate':>14}{'ratio':>10}  better-if"]
    for name, row in table.items():
        ratio = "n/a" if row["ratio"] is None else f"{row['ratio']:.2f}x"
        lines.append(
            f"{name:<24}{row['baseline']:>14.4g}{row['candidate']:>14.4g}{ratio:>10}  {row['direction']}"
        )
    return "\n".join(lines)
