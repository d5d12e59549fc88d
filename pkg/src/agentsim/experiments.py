"""Built-in experiment presets and the matrix runner.

Every preset runs on the same benchmark corpus: 20,000 Gaussian vectors in
64 dimensions (seed 0), indexed with M=16, ef_construction=100. Retrieval
cost is scaled so a desk-size search (ef=200, roughly 200 expansion steps)
takes about 0.3 s of simulated time, the same order as a full-size search.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from agentsim.ann.hnsw import HnswIndex, build_index, load_index, save_index
from agentsim.ann.vectors import Dataset, gaussian_dataset, read_saxv, write_saxv
from agentsim.config import ExperimentSpec, IndexParams, Variation
from agentsim.engine import EngineConfig
from agentsim.errors import ConfigError
from agentsim.metrics import MetricsSummary
from agentsim.orchestrator import (
    ANN, ANN_NONSTALL, ENN, OracleCache, RetrievalMode, RunConfig, run,
)
from agentsim.workload import Arrival, RequestTrace, WorkloadConfig

BENCH_COUNT = 20_000
BENCH_DIM = 64
BENCH_SEED = 0
BENCH_INDEX = IndexParams(M=16, ef_construction=100, seed=0)

DESK_COST = 1.5e-3
DESK_WINDOW = 50
PRIORITY = "priority:6"

# Half of the seed-0 128-request workload's peak KV demand (34,435 blocks),
# so the ablation runs ~2x oversubscribed. Checked by the test suite.
ABLATE_KV_BLOCKS = 17_218

CSV_KEYS = ["name", "mode", "policy", "top_k", "ef", "rate"]


def kv_demand_blocks(traces: Sequence[RequestTrace], engine: EngineConfig, top_k: int,
                     wl: WorkloadConfig) -> int:
    """Blocks needed to keep every request's final context resident at once.

    The shared system prompt is counted once. Retries are not counted.
    """
    bs = engine.block_size
    shared = engine.shared_prefix_len // bs
    total = shared
    for tr in traces:
        ctx = (engine.shared_prefix_len + wl.prompt_tokens
               + sum(s.decode_tokens for s in tr.segments)
               + tr.planned_retrievals * top_k * wl.doc_tokens)
        total += math.ceil(ctx / bs) - shared
    return total


def _ann(ef: int = 200) -> RetrievalMode:
    return RetrievalMode(ANN, ef)


def _nonstall(ef: int = 200, tau: float = 0.9) -> RetrievalMode:
    return RetrievalMode(ANN_NONSTALL, ef, tau, DESK_WINDOW)


def _range() -> List[Variation]:
    wl = WorkloadConfig(num_requests=64, noise_scale=1.0)
    return [Variation(f"ef{ef}", RunConfig(_ann(ef), "fcfs", 5, EngineConfig(), wl, DESK_COST))
            for ef in (10, 50, 200, 1000, 5000)]


def _magnify() -> List[Variation]:
    wl = WorkloadConfig(arrival=Arrival("poisson", rate=0.2, duration=800.0))
    out = []
    # the zero-cost run is the "generation only" reference latency
    for mult in (0, 1, 2, 5, 10):
        out.append(Variation(f"cost{mult}x", RunConfig(_ann(), "fcfs", 5, EngineConfig(), wl,
                                                       DESK_COST * mult)))
    return out


def _ablate() -> List[Variation]:
    wl = WorkloadConfig(num_requests=128)
    eng = EngineConfig(kv_capacity_blocks=ABLATE_KV_BLOCKS)
    return [
        Variation("fcfs-ann", RunConfig(_ann(), "fcfs", 5, replace(eng, prefix_cache=False), wl, DESK_COST)),
        Variation("fcfs-ann-cache", RunConfig(_ann(), "fcfs", 5, eng, wl, DESK_COST)),
        Variation("priority", RunConfig(_ann(), PRIORITY, 5, eng, wl, DESK_COST)),
        Variation("priority-nonstall", RunConfig(_nonstall(), PRIORITY, 5, eng, wl, DESK_COST)),
    ]


def _online() -> List[Variation]:
    out = []
    # request rates are the 1..6 req/s sweep scaled by the engine's capacity (~0.25 req/s)
    for step in range(1, 7):
        rate = round(0.05 * step, 2)
        wl = WorkloadConfig(arrival=Arrival("poisson", rate=rate, duration=600.0))
        out.append(Variation(f"baseline-r{rate}", RunConfig(_ann(), "fcfs", 5, EngineConfig(), wl, DESK_COST)))
        out.append(Variation(f"full-r{rate}", RunConfig(_nonstall(), PRIORITY, 5, EngineConfig(), wl, DESK_COST)))
    return out


def _maturity() -> List[Variation]:
    wl = WorkloadConfig(num_requests=64)
    out = [Variation("natural", RunConfig(_ann(), PRIORITY, 5, EngineConfig(), wl, DESK_COST))]
    for tau in (0.8, 0.85, 0.9, 0.95):
        out.append(Variation(f"tau{tau}", RunConfig(_nonstall(tau=tau), PRIORITY, 5, EngineConfig(), wl,
                                                    DESK_COST)))
    return out


PRESETS = {
    "E-RANGE": _range,
    "E-MAGNIFY": _magnify,
    "E-ABLATE": _ablate,
    "E-ONLINE": _online,
    "E-MATURITY": _maturity,
}


def preset(name: str, dataset: Union[str, Path], output_dir: Union[str, Path],
           index: Optional[Union[str, Path]] = None, workers: int = 1) -> ExperimentSpec:
    key = name.upper()
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    vs = tuple(replace(v, name=f"{key.lower()}-{v.name}") for v in PRESETS[key]())
    return ExperimentSpec(key, vs, str(output_dir), str(dataset),
                          None if index is None else str(index), BENCH_INDEX, workers)


def bench_dataset() -> Dataset:
    return gaussian_dataset(BENCH_COUNT, BENCH_DIM, BENCH_SEED)


def _atomic_write(path: Path, data: Union[str, bytes]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ensure_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    return read_saxv(path)


def ensure_index(path: Union[str, Path], ds: Dataset, params: IndexParams) -> HnswIndex:
    """Load the index at ``path``, building and saving it first if absent."""
    path = Path(path)
    if path.exists():
        return load_index(path, ds)
    index = build_index(ds, params.M, params.ef_construction, params.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        save_index(index, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return index


def _index_path(spec: ExperimentSpec, out: Path) -> Path:
    return Path(spec.index) if spec.index else out / "index.bin"


# per-process state for pool workers
_STATE: Dict[str, object] = {}


def _init_worker(dataset: str, index: str) -> None:
    ds = read_saxv(dataset)
    _STATE.update(ds=ds, index=load_index(index, ds), oracle=OracleCache(ds))


def _run_variation(v: Variation) -> MetricsSummary:
    return run(v.config, _STATE["index"], _STATE["ds"], oracle=_STATE["oracle"]).summary


def csv_row(v: Variation, s: MetricsSummary) -> list:
    cfg = v.config
    mode = cfg.retrieval_mode
    arr = cfg.workload.arrival
    head = [v.name, mode.kind, cfg.policy, cfg.top_k,
            "" if mode.kind == ENN else mode.ef,
            "" if arr.kind == "offline" else arr.rate]
    return head + [getattr(s, f) for f in MetricsSummary.field_names()]


def render_csv(rows: Sequence[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_KEYS + MetricsSummary.field_names())
    w.writerows(rows)
    return buf.getvalue()


def run_matrix(spec: ExperimentSpec, output_dir: Optional[Union[str, Path]] = None) -> Dict[str, MetricsSummary]:
    """Run every variation; write ``<name>.json`` per run and ``<spec>.csv``.

    Results do not depend on ``spec.workers``; reruns overwrite with identical bytes.
    """
    out = Path(output_dir if output_dir is not None else spec.output_dir)
    ds = ensure_dataset(spec.dataset)
    idx_path = _index_path(spec, out)
    ensure_index(idx_path, ds, spec.index_params)

    if spec.workers > 1 and len(spec.variations) > 1:
        with ProcessPoolExecutor(spec.workers, initializer=_init_worker,
                                 initargs=(spec.dataset, str(idx_path))) as pool:
            summaries = list(pool.map(_run_variation, spec.variations))
    else:
        _init_worker(spec.dataset, str(idx_path))
        summaries = [_run_variation(v) for v in spec.variations]

    results = {}
    rows = []
    for v, s in zip(spec.variations, summaries):
        _atomic_write(out / f"{v.name}.json", s.to_json())
        rows.append(csv_row(v, s))
        results[v.name] = s
    _atomic_write(out / f"{spec.name.lower()}.csv", render_csv(rows))
    return results


def write_bench_dataset(path: Union[str, Path]) -> Dataset:
    ds = bench_dataset()
    write_saxv(path, ds)
    return ds
