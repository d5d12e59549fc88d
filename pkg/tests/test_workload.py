import math

import numpy as np
import pytest

from agentsim.ann.vectors import brute_force_topk, gaussian_dataset
from agentsim.errors import InvalidInputError
from agentsim.workload import (
    ANSWER, RETRIEVE, Arrival, IntDistribution, RequestTrace, Segment, WorkloadConfig,
    dumps_jsonl, generate_workload, loads_jsonl, poisson_arrivals, query_vector, retry_segment,
    trace_from_dict, trace_to_dict,
)

DS = gaussian_dataset(500, 8, seed=0)


def test_single_request_without_retrievals():
    cfg = WorkloadConfig(num_requests=1, retrievals_per_request=IntDistribution(0))
    (tr,) = generate_workload(cfg, DS)
    assert len(tr.segments) == 1 and tr.segments[0].action == ANSWER


def test_offline_arrivals_are_zero():
    traces = generate_workload(WorkloadConfig(num_requests=20), DS)
    assert [t.arrival_time for t in traces] == [0.0] * 20
    assert [t.id for t in traces] == list(range(20))


def test_trace_shape():
    for tr in generate_workload(WorkloadConfig(num_requests=50), DS):
        acts = [s.action for s in tr.segments]
        assert acts[-1] == ANSWER and ANSWER not in acts[:-1]
        assert 0 <= tr.planned_retrievals <= 8
        assert all(s.decode_tokens >= 10 for s in tr.segments)
        assert tr.max_extra_retrievals == 2


def test_poisson_workload_count():
    cfg = WorkloadConfig(seed=4, arrival=Arrival("poisson", rate=5, duration=600))
    n = len(generate_workload(cfg, DS))
    assert abs(n - 3000) <= 3 * math.sqrt(3000)


def test_poisson_arrivals():
    assert poisson_arrivals(1.0, 1e-9, seed=0) == []
    a = poisson_arrivals(2.0, 100, seed=7)
    assert a == poisson_arrivals(2.0, 100, seed=7)
    assert a == sorted(a) and all(0 <= t < 100 for t in a)
    long = poisson_arrivals(1.0, 10_000, seed=1)
    gaps = np.diff([0.0] + long)
    assert abs(gaps.mean() - 1.0) <= 0.05
    with pytest.raises(InvalidInputError):
        poisson_arrivals(0, 10, seed=0)


def test_online_arrivals_within_window():
    cfg = WorkloadConfig(arrival=Arrival("poisson", rate=0.5, duration=200))
    ts = [t.arrival_time for t in generate_workload(cfg, DS)]
    assert ts and all(0 <= t < 200 for t in ts)


def test_reproducible_serialisation():
    cfg = WorkloadConfig(seed=3, num_requests=30)
    assert dumps_jsonl(generate_workload(cfg, DS)) == dumps_jsonl(generate_workload(cfg, DS))
    assert dumps_jsonl(generate_workload(cfg, DS)) != \
           dumps_jsonl(generate_workload(WorkloadConfig(seed=4, num_requests=30), DS))


def test_jsonl_round_trip_and_field_names():
    traces = generate_workload(WorkloadConfig(num_requests=5), DS)
    text = dumps_jsonl(traces)
    assert loads_jsonl(text) == traces
    d = trace_to_dict(traces[0])
    assert list(d) == ["id", "arrival_time", "segments", "max_extra_retrievals"]
    assert list(d["segments"][0]) == ["decode_tokens", "action", "query_point", "noise_seed"]
    with pytest.raises(InvalidInputError):
        trace_from_dict({**d, "extra": 1})


def test_segment_and_trace_validation():
    with pytest.raises(InvalidInputError):
        Segment(0, ANSWER)
    with pytest.raises(InvalidInputError):
        Segment(5, RETRIEVE)
    with pytest.raises(InvalidInputError):
        RequestTrace(0, 0.0, (Segment(5, ANSWER), Segment(5, ANSWER)), 0)
    with pytest.raises(InvalidInputError):
        RequestTrace(0, 0.0, (Segment(5, RETRIEVE, 1, 1),), 0)
    with pytest.raises(InvalidInputError):
        IntDistribution(-1)
    with pytest.raises(InvalidInputError):
        WorkloadConfig(retry_cap=-1)
    with pytest.raises(InvalidInputError):
        Arrival("poisson", rate=1.0)


def test_noise_free_query_recovers_source_point():
    traces = generate_workload(WorkloadConfig(num_requests=10), DS)
    for tr in traces:
        for s in tr.segments[:-1]:
            q = query_vector(DS, s.query_point, s.noise_seed, 0.0)
            assert brute_force_topk(DS, q, 1)[0][0] == s.query_point


def test_noise_is_seeded():
    a = query_vector(DS, 3, 99, 0.5)
    assert np.array_equal(a, query_vector(DS, 3, 99, 0.5))
    assert not np.array_equal(a, query_vector(DS, 3, 100, 0.5))


def test_retry_segment_keeps_source_and_redraws_noise():
    cfg = WorkloadConfig(seed=1)
    r1 = retry_segment(cfg, 4, 1, query_point=17)
    r2 = retry_segment(cfg, 4, 2, query_point=17)
    assert r1.action == RETRIEVE and r1.query_point == r2.query_point == 17
    assert r1.noise_seed != r2.noise_seed
    assert r1 == retry_segment(cfg, 4, 1, query_point=17)
