import time

import numpy as np
import pytest

from agentsim.ann.hnsw import build_index, save_index
from agentsim.ann.vectors import gaussian_dataset, write_saxv
from agentsim.experiments import BENCH_INDEX, bench_dataset


@pytest.fixture(scope="session")
def small_ds():
    return gaussian_dataset(1000, 16, seed=3)


@pytest.fixture(scope="session")
def small_index(small_ds):
    return build_index(small_ds, M=16, ef_construction=100, seed=0)


@pytest.fixture(scope="session")
def small_queries(small_ds):
    rng = np.random.default_rng(11)
    return rng.standard_normal((100, small_ds.dim)).astype(np.float32)


@pytest.fixture(scope="session")
def bench_files(tmp_path_factory):
    """The 20k x 64 benchmark corpus and its index, written once per session."""
    root = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    ds = bench_dataset()
    index = build_index(ds, BENCH_INDEX.M, BENCH_INDEX.ef_construction, BENCH_INDEX.seed)
    build_seconds = time.perf_counter() - t0
    write_saxv(root / "bench.saxv", ds)
    save_index(index, root / "bench.idx")
    return {"ds": ds, "index": index, "data": root / "bench.saxv", "idx": root / "bench.idx",
            "build_seconds": build_seconds}


@pytest.fixture(scope="session")
def tiny_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    ds = gaussian_dataset(2000, 16, seed=5)
    index = build_index(ds, 8, 40, 0)
    write_saxv(root / "tiny.saxv", ds)
    save_index(index, root / "tiny.idx")
    return {"ds": ds, "index": index, "data": root / "tiny.saxv", "idx": root / "tiny.idx"}
