"""Seeded search-agent request traces and arrival processes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Iterable, List, Optional, Union

import numpy as np

from agentsim.ann.vectors import Dataset
from agentsim.errors import InvalidInputError

RETRIEVE = "retrieve"
ANSWER = "answer"
_RETRY_STREAM = 1_000_000


@dataclass(frozen=True)
class Segment:
    decode_tokens: int
    action: str
    query_point: Optional[int] = None
    noise_seed: Optional[int] = None

    def __post_init__(self):
        if self.decode_tokens < 1:
            raise InvalidInputError("decode_tokens must be >= 1")
        if self.action not in (RETRIEVE, ANSWER):
            raise InvalidInputError(f"unknown action {self.action!r}")
        if self.action == RETRIEVE and (self.query_point is None or self.noise_seed is None):
            raise InvalidInputError("retrieve segments need query_point and noise_seed")


@dataclass(frozen=True)
class RequestTrace:
    id: int
    arrival_time: float
    segments: tuple
    max_extra_retrievals: int

    def __post_init__(self):
        if not self.segments:
            raise InvalidInputError("a trace needs at least one segment")
        if self.arrival_time < 0:
            raise InvalidInputError("arrival_time must be >= 0")
        actions = [s.action for s in self.segments]
        if actions[-1] != ANSWER or ANSWER in actions[:-1]:
            raise InvalidInputError("exactly the final segment must answer")

    @property
    def planned_retrievals(self) -> int:
        return len(self.segments) - 1


@dataclass(frozen=True)
class IntDistribution:
    """Normal draw, rounded and clamped to ``[min, max]``."""

    mean: float
    sd: float = 0.0
    min: int = 0
    max: Optional[int] = None

    def __post_init__(self):
        if self.mean < 0 or self.sd < 0:
            raise InvalidInputError("distribution mean and sd must be non-negative")
        if self.max is not None and self.max < self.min:
            raise InvalidInputError("distribution max < min")

    def draw(self, rng: np.random.Generator) -> int:
        x = int(round(rng.normal(self.mean, self.sd))) if self.sd > 0 else int(round(self.mean))
        x = max(self.min, x)
        if self.max is not None:
            x = min(self.max, x)
        return x


@dataclass(frozen=True)
class Arrival:
    kind: str = "offline"
    rate: Optional[float] = None
    duration: Optional[float] = None

    def __post_init__(self):
        if self.kind == "offline":
            return
        if self.kind != "poisson":
            raise InvalidInputError(f"arrival kind must be offline or poisson, got {self.kind!r}")
        if not self.rate or self.rate <= 0 or not self.duration or self.duration <= 0:
            raise InvalidInputError("poisson arrivals need positive rate and duration")


@dataclass(frozen=True)
class WorkloadConfig:
    seed: int = 0
    num_requests: int = 64
    arrival: Arrival = field(default_factory=Arrival)
    retrievals_per_request: IntDistribution = field(
        default_factory=lambda: IntDistribution(mean=4, sd=2, min=0, max=8))
    segment_tokens: IntDistribution = field(
        default_factory=lambda: IntDistribution(mean=150, sd=50, min=10))
    doc_tokens: int = 200
    retry_cap: int = 2
    noise_scale: float = 0.0
    prompt_tokens: int = 32

    def __post_init__(self):
        if self.num_requests < 0:
            raise InvalidInputError("num_requests must be >= 0")
        if self.segment_tokens.mean <= 0 or self.segment_tokens.min < 1:
            raise InvalidInputError("segment_tokens needs a positive mean and min >= 1")
        if self.doc_tokens < 0 or self.retry_cap < 0 or self.noise_scale < 0 or self.prompt_tokens < 0:
            raise InvalidInputError("doc_tokens, retry_cap, noise_scale, prompt_tokens must be >= 0")


def poisson_arrivals(rate: float, duration: float, seed: int) -> List[float]:
    """Arrival times in ``[0, duration)`` with exponential gaps."""
    if rate <= 0 or duration <= 0:
        raise InvalidInputError("rate and duration must be positive")
    rng = np.random.default_rng(seed)
    times = []
    t = 0.0
    chunk = max(16, int(rate * duration * 1.2) + 16)
    while True:
        for gap in rng.exponential(1.0 / rate, size=chunk):
            t += float(gap)
            if t >= duration:
                return times
            times.append(t)


def _seed_for(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1)[0])


def generate_workload(cfg: WorkloadConfig, ds: Dataset) -> List[RequestTrace]:
    if ds.count < 1:
        raise InvalidInputError("dataset is empty")
    if cfg.arrival.kind == "offline":
        arrivals = [0.0] * cfg.num_requests
    else:
        arrivals = poisson_arrivals(cfg.arrival.rate, cfg.arrival.duration, _seed_for(cfg.seed, 0xA11))
    traces = []
    for rid, at in enumerate(arrivals):
        rng = np.random.default_rng([cfg.seed, rid])
        n_ret = cfg.retrievals_per_request.draw(rng)
        segments = []
        for _ in range(n_ret):
            segments.append(Segment(
                decode_tokens=cfg.segment_tokens.draw(rng),
                action=RETRIEVE,
                query_point=int(rng.integers(ds.count)),
                noise_seed=int(rng.integers(2**31)),
            ))
        segments.append(Segment(decode_tokens=cfg.segment_tokens.draw(rng), action=ANSWER))
        traces.append(RequestTrace(rid, float(at), tuple(segments), cfg.retry_cap))
    return traces


def retry_segment(cfg: WorkloadConfig, request_id: int, retry_no: int, query_point: int) -> Segment:
    """The extra reason-and-retrieve segment appended after a failed retrieval.

    The source point is kept and only the noise is redrawn, so a retry can
    succeed where the first attempt did not.
    """
    rng = np.random.default_rng([cfg.seed, request_id, _RETRY_STREAM + retry_no])
    return Segment(
        decode_tokens=cfg.segment_tokens.draw(rng),
        action=RETRIEVE,
        query_point=query_point,
        noise_seed=int(rng.integers(2**31)),
    )


def query_vector(ds: Dataset, query_point: int, noise_seed: int, noise_scale: float) -> np.ndarray:
    """Source point plus seeded Gaussian noise."""
    base = ds.vectors[query_point]
    if noise_scale == 0:
        return base.copy()
    rng = np.random.default_rng(noise_seed)
    noise = rng.standard_normal(ds.dim).astype(np.float32)
    return (base + np.float32(noise_scale) * noise).astype(np.float32)


def trace_to_dict(tr: RequestTrace) -> dict:
    return {
        "id": tr.id,
        "arrival_time": tr.arrival_time,
        "segments": [
            {"decode_tokens": s.decode_tokens, "action": s.action,
             "query_point": s.query_point, "noise_seed": s.noise_seed}
            for s in tr.segments
        ],
        "max_extra_retrievals": tr.max_extra_retrievals,
    }


def trace_from_dict(d: dict) -> RequestTrace:
    expected = {"id", "arrival_time", "segments", "max_extra_retrievals"}
    if set(d) != expected:
        raise InvalidInputError(f"trace fields must be exactly {sorted(expected)}, got {sorted(d)}")
    segs = []
    for s in d["segments"]:
        if set(s) != {"decode_tokens", "action", "query_point", "noise_seed"}:
            raise InvalidInputError(f"bad segment fields: {sorted(s)}")
        segs.append(Segment(**s))
    return RequestTrace(int(d["id"]), float(d["arrival_time"]), tuple(segs), int(d["max_extra_retrievals"]))


def dumps_jsonl(traces: Iterable[RequestTrace]) -> str:
    return "".join(json.dumps(trace_to_dict(t), sort_keys=False) + "\n" for t in traces)


def loads_jsonl(text: str) -> List[RequestTrace]:
    return [trace_from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
