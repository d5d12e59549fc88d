import random

import pytest

from agentsim.engine import (
    DECODING, DONE, RETRIEVING, SHARED_OWNER, WAITING, Engine, EngineConfig, KvCacheModel,
    SequenceState, SimClock, hit_rate,
)
from agentsim.errors import InvalidInputError, StateError


def seq(rid, ctx, decode=5):
    return SequenceState(rid, ctx, 0.0, 0.0, remaining_decode=decode)


def idle(cache, rid, ctx, t):
    s = seq(rid, ctx)
    assert cache.allocate(s, 0, cache.blocks_for(ctx), t) == 0
    cache.release(s, t)
    return s


def test_clock():
    c = SimClock()
    c.schedule(2.0, "b")
    c.schedule(1.0, "a")
    c.schedule(1.0, "a2")
    assert c.peek_time() == 1.0
    c.advance_to(1.5)
    assert c.pop_due() == ["a", "a2"] and len(c) == 1
    with pytest.raises(StateError):
        c.advance_to(1.0)


def test_evict_nothing_when_all_pinned():
    cache = KvCacheModel(16, 8)
    cache.allocate(seq(1, 64), 0, 4, 0.0)
    assert cache.evict_lru(2) == 0
    with pytest.raises(InvalidInputError):
        cache.evict_lru(0)


def test_evict_least_recent_owner():
    cache = KvCacheModel(16, 8)
    idle(cache, 1, 32, 10.0)
    idle(cache, 2, 32, 20.0)
    assert cache.evict_lru(1) == 1
    assert set(cache.resident) == {(1, 0), (2, 0), (2, 1)}


def test_evict_from_the_top_of_a_chain():
    cache = KvCacheModel(16, 8)
    idle(cache, 1, 48, 1.0)
    assert cache.evict_lru(2) == 2
    assert set(cache.resident) == {(1, 0)}
    cache.check_invariants()


def test_shared_prompt_survives_ties():
    cache = KvCacheModel(16, 8, shared_prefix_len=32)
    idle(cache, 1, 48, 5.0)
    assert cache.evict_lru(1) == 1
    assert (1, 2) not in cache.resident
    assert (SHARED_OWNER, 1) in cache.resident


def test_prefix_lookup_cases():
    cache = KvCacheModel(16, 64, shared_prefix_len=512)
    assert cache.prefix_lookup(seq(1, 600), 0.0) == 0
    idle(cache, 1, 512, 0.0)
    s2 = seq(2, 700)
    assert cache.prefix_lookup(s2, 1.0) == 512
    assert all(cache.resident[(SHARED_OWNER, i)].ref_count == 1 for i in range(32))
    cache.unpin(s2, 32, 1.0)
    s3 = idle(cache, 3, 520, 2.0)
    assert cache.prefix_lookup(s3, 3.0) == 512  # the 8-token tail block was dropped
    cache.unpin(s3, 32, 3.0)
    s4 = idle(cache, 4, 544, 4.0)
    assert cache.prefix_lookup(s4, 5.0) == 544


def test_disabled_cache_matches_nothing():
    cache = KvCacheModel(16, 64, shared_prefix_len=32, enabled=False)
    s = idle(cache, 1, 64, 0.0)
    assert cache.used == 0 and cache.prefix_lookup(s, 1.0) == 0


def test_allocate_refuses_without_room():
    cache = KvCacheModel(16, 4)
    cache.allocate(seq(1, 48), 0, 3, 0.0)
    assert cache.allocate(seq(2, 32), 0, 2, 0.0) is None
    assert cache.used == 3


def cfg(**kw):
    base = dict(iter_base=1e-3, prefill_cost=1e-4, decode_cost=1e-3, shared_prefix_len=0)
    base.update(kw)
    return EngineConfig(**base)


def test_empty_iteration_costs_base_latency():
    eng = Engine(cfg())
    rep = eng.run_iteration([])
    assert rep.latency == 1e-3 and rep.prefilled_computed == 0 and rep.decoded_seqs == 0
    assert eng.clock.now == 1e-3


def test_one_uncached_prefill():
    eng = Engine(cfg())
    s = seq(1, 100)
    eng.add_waiting(s)
    rep = eng.run_iteration([s])
    assert rep.latency == pytest.approx(0.011)
    assert eng.cache.used == 7
    assert rep.admitted == [1] and s.phase == DECODING and not eng.waiting


def test_aligned_reprefill_is_free():
    eng = Engine(cfg())
    s = seq(1, 96)
    eng.add_waiting(s)
    eng.run_iteration([s])
    eng.stop_running(s, RETRIEVING)
    s.phase = WAITING
    eng.add_waiting(s)
    rep = eng.run_iteration([s])
    assert rep.prefilled_computed == 0 and rep.prefilled_cached == 96
    assert eng.hit_rate() == 0.5


def test_decode_runs_to_segment_end():
    eng = Engine(cfg())
    s = seq(1, 30, decode=3)
    eng.add_waiting(s)
    eng.run_iteration([s])
    done = []
    for _ in range(3):
        done += eng.run_iteration([]).segment_done
    assert done == [1] and s.context_len == 33 and s.remaining_decode == 0
    eng.stop_running(s, DONE)
    assert eng.cache.used == 0 and s.phase == DONE
    with pytest.raises(StateError):
        eng.stop_running(s, DONE)


def test_budget_and_oversized_first_prefill():
    eng = Engine(cfg(max_batch_tokens=64))
    a, b, c = seq(1, 100), seq(2, 10), seq(3, 60)
    for s in (a, b, c):
        eng.add_waiting(s)
    rep = eng.run_iteration([a, b, c])
    # the oversized head is allowed alone; b no longer fits behind it
    assert rep.admitted == [1]
    rep = eng.run_iteration([b, c])
    assert rep.admitted == [2]


def test_is_ready():
    eng = Engine(cfg(max_batch_tokens=100, max_batch_seqs=2))
    assert eng.is_ready()
    eng.add_waiting(seq(1, 98))
    assert eng.is_ready()
    eng.add_waiting(seq(2, 1))
    assert not eng.is_ready()


def test_add_waiting_checks_phase():
    s = seq(1, 10)
    s.phase = DECODING
    with pytest.raises(StateError):
        Engine(cfg()).add_waiting(s)


def test_preemption_when_cache_is_full():
    eng = Engine(cfg(kv_capacity_blocks=2))
    s = seq(1, 31, decode=10)
    eng.add_waiting(s)
    eng.run_iteration([s])
    eng.run_iteration([])          # 31 -> 32
    rep = eng.run_iteration([])    # needs a third block
    assert rep.preempted == [1] and s.phase == WAITING and eng.waiting == [s]


def test_invariants_under_random_load():
    rng = random.Random(3)
    eng = Engine(cfg(kv_capacity_blocks=40, shared_prefix_len=32, max_batch_tokens=256))
    live = {}
    for step in range(400):
        if rng.random() < 0.3:
            s = seq(step, rng.randint(32, 200), decode=rng.randint(1, 20))
            eng.add_waiting(s)
            live[step] = s
        rep = eng.run_iteration(sorted(eng.waiting, key=lambda s: s.request_id))
        for rid in rep.segment_done:
            eng.stop_running(live[rid], DONE if rng.random() < 0.5 else RETRIEVING)
        eng.cache.check_invariants()
        assert all(b.ref_count >= 0 for b in eng.cache.resident.values())
        assert 0.0 <= eng.hit_rate() <= 1.0


def test_hit_rate_cases():
    assert hit_rate(0, 0) == 0.0
    assert hit_rate(10, 10) == 1.0
    assert hit_rate(650, 1000) == 0.65
    with pytest.raises(InvalidInputError):
        hit_rate(-1, 5)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        EngineConfig(block_size=0)
    with pytest.raises(InvalidInputError):
        EngineConfig(shared_prefix_len=-1)
