import pytest

from agentsim.ann.search import results_at_step, search_natural
from agentsim.engine import RETRIEVING, SequenceState
from agentsim.errors import ConfigError, StateError
from agentsim.orchestrator import (
    ANN, ANN_NONSTALL, ENN, RetrievalMode, RetrievalTask, RunConfig, check_non_stall,
    complete_retrieval, naive_rag_latency, run, stall_accounting,
)
from agentsim.workload import IntDistribution, WorkloadConfig


def retrieving(ctx=1000):
    s = SequenceState(7, ctx, 0.0, 0.0, r_i=2)
    s.phase = RETRIEVING
    return s


def test_complete_retrieval():
    s = complete_retrieval(retrieving(), 5 * 200, now=3.5)
    assert (s.context_len, s.r_i, s.phase, s.t_arr_current) == (2000, 3, "waiting_prefill", 3.5)
    s = complete_retrieval(retrieving(), 0, now=1.0)
    assert s.context_len == 1000 and s.phase == "waiting_prefill"
    with pytest.raises(StateError):
        complete_retrieval(s, 10, now=2.0)


def test_naive_rag_latency():
    assert naive_rag_latency(10, 0.5, 0) == 10
    assert naive_rag_latency(10, 0.5, 4) == 12.0
    assert naive_rag_latency(10, 1.5, 4) - naive_rag_latency(10, 0.5, 4) == pytest.approx(4.0)


def ev(kind, t, rid, **kw):
    return {"kind": kind, "t": t, "request_id": rid, **kw}


def test_stall_accounting():
    assert stall_accounting([]) == 0.0
    on_time = [ev("retrieve_end", 1.0, 1, iter_latency=0.1), ev("admit", 1.0, 1)]
    assert stall_accounting(on_time) == 0.0
    next_iter = [ev("retrieve_end", 1.0, 1, iter_latency=0.125), ev("admit", 1.125, 1)]
    assert stall_accounting(next_iter) == 0.0
    late = [ev("retrieve_end", 1.001, 1, iter_latency=0.1), ev("admit", 1.2, 1)]
    assert stall_accounting(late) == 1.0
    # first admissions are not resumptions
    assert stall_accounting([ev("admit", 0.0, 2)] + late) == 1.0
    assert stall_accounting(on_time + [ev("retrieve_end", 1.001, 2, iter_latency=0.1),
                                       ev("admit", 1.2, 2)]) == 0.5


def make_task(index, q, maturity, natural):
    tr = search_natural(index, q, 200, 10, tau=0.9, window=50)
    assert tr.maturity_step is not None
    t = RetrievalTask(1, q, 0.0, 1e-4, list(tr.final_topk), natural, trace=tr, ef=200, window=50)
    t.maturity_time = maturity
    return t, tr


def test_check_non_stall(small_index, small_queries):
    q = small_queries[0]
    t, tr = make_task(small_index, q, 0.20, 0.30)
    assert check_non_stall([t], False, 0.24) == []
    assert check_non_stall([t], True, 0.19) == []
    assert check_non_stall([t], True, 0.30) == []
    assert check_non_stall([t], True, 0.24, small_index, 10) == [1]
    assert t.terminated_early and t.deliver_time == 0.24 and t.result_cut == tr.maturity_step
    assert t.results == results_at_step(small_index, q, 200, 10, tr.maturity_step, window=50)
    assert check_non_stall([t], True, 0.25, small_index, 10) == []


def test_unmatured_task_is_never_cut(small_index, small_queries):
    t, _ = make_task(small_index, small_queries[1], 0.20, 0.30)
    t.maturity_time = None
    assert check_non_stall([t], True, 0.25) == []


def small_cfg(**kw):
    wl = kw.pop("workload", WorkloadConfig(num_requests=12))
    return RunConfig(workload=wl, **kw)


def test_single_request_without_retrieval(small_ds, small_index):
    wl = WorkloadConfig(num_requests=1, retrievals_per_request=IntDistribution(0))
    res = run(small_cfg(workload=wl), small_index, small_ds)
    (req,) = res.requests.values()
    decode = req.trace.segments[0].decode_tokens
    e = res.summary
    # one prefill step of 512 + 32 tokens, then one decode step per token
    assert e.mean_latency == pytest.approx(2e-3 + 544e-4 + decode * (2e-3 + 5e-3))
    assert e.mean_retrieval_count == 0 and e.requests_completed == 1 and e.stall_ratio == 0


def test_noise_free_exact_search_needs_no_retries(small_ds, small_index):
    res = run(small_cfg(retrieval_mode=RetrievalMode(ENN)), small_index, small_ds)
    assert res.summary.mean_recall == 1.0
    for r in res.requests.values():
        assert r.seq.r_i == r.trace.planned_retrievals
    assert all(t.results == t.oracle for t in res.tasks)


def test_causality_and_cut_dominance(small_ds, small_index):
    cfg = small_cfg(retrieval_mode=RetrievalMode(ANN_NONSTALL, ef=100, window=50),
                    workload=WorkloadConfig(num_requests=24, noise_scale=0.5))
    res = run(cfg, small_index, small_ds)
    assert res.summary.requests_completed == 24
    for t in res.tasks:
        assert t.sim_start <= t.deliver_time <= t.natural_finish_time
        assert t.result_cut <= t.trace.natural_stop_step
    first_admit = {}
    for e in res.events:
        if e["kind"] == "admit":
            first_admit.setdefault(e["request_id"], e["t"])
    for rid, r in res.requests.items():
        assert first_admit[rid] >= r.trace.arrival_time
        assert r.extra_used <= r.trace.max_extra_retrievals


def test_mean_latency_matches_event_log(small_ds, small_index):
    res = run(small_cfg(), small_index, small_ds)
    lat = [e["latency"] for e in res.events if e["kind"] == "done"]
    assert sum(lat) / len(lat) == pytest.approx(res.summary.mean_latency, rel=1e-9)


def test_runs_are_reproducible(small_ds, small_index):
    cfg = small_cfg(retrieval_mode=RetrievalMode(ANN_NONSTALL, ef=100, window=50), policy="priority:6",
                    workload=WorkloadConfig(num_requests=16, noise_scale=0.5))
    a = run(cfg, small_index, small_ds)
    b = run(cfg, small_index, small_ds, workers=3)
    assert a.summary_json() == b.summary_json()
    assert a.events_jsonl() == b.events_jsonl()


def test_startup_errors(small_ds, small_index, tiny_files):
    with pytest.raises(ConfigError):
        run(small_cfg(), tiny_files["index"], small_ds)
    with pytest.raises(ConfigError):
        RunConfig(top_k=20, retrieval_mode=RetrievalMode(ANN, ef=10))
    with pytest.raises(ConfigError):
        RunConfig(policy="random")
    with pytest.raises(ConfigError):
        RetrievalMode("fast")


@pytest.fixture(scope="module")
def enn_vs_ann(bench_files):
    ds, index = bench_files["ds"], bench_files["index"]
    enn = run(RunConfig(retrieval_mode=RetrievalMode(ENN)), index, ds).summary
    ann = run(RunConfig(retrieval_mode=RetrievalMode(ANN, ef=200)), index, ds).summary
    return enn, ann


def test_exact_search_is_slower_per_retrieval(enn_vs_ann):
    enn, ann = enn_vs_ann
    assert enn.mean_retrieval_latency > ann.mean_retrieval_latency
    assert enn.mean_recall == 1.0


@pytest.mark.xfail(strict=True, reason="engine time dominates at desk scale: ENN 199.84 s vs ANN 200.69 s")
def test_exact_search_is_slower_end_to_end(enn_vs_ann):
    enn, ann = enn_vs_ann
    assert enn.mean_latency > ann.mean_latency
