"""Command-line entry point: ``agentsim <subcommand> ... --out PATH``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from agentsim.ann.hnsw import build_index, save_index
from agentsim.ann.vectors import gaussian_dataset, write_saxv
from agentsim.config import (
    ExperimentSpec, IndexParams, apply_env, dumps, load_experiment, load_run_config,
)
from agentsim.errors import AgentSimError
from agentsim.experiments import PRESETS, ensure_dataset, ensure_index, preset, run_matrix
from agentsim.metrics import compare_report, format_report
from agentsim.orchestrator import RunConfig, run
from agentsim.workload import dumps_jsonl, generate_workload, loads_jsonl

log = logging.getLogger("agentsim")

EXIT_CONFIG = 2


def _gen_data(args) -> None:
    ds = gaussian_dataset(args.count, args.dim, args.seed, normalize=args.normalize)
    write_saxv(args.out, ds)
    log.info("wrote %d x %d vectors to %s", ds.count, ds.dim, args.out)


def _build_index(args) -> None:
    ds = ensure_dataset(args.data)
    index = build_index(ds, args.M, args.ef_construction, args.seed)
    save_index(index, args.out)
    log.info("index: %d nodes, %d layers, entry %d -> %s",
             index.count, index.max_level + 1, index.entry_point, args.out)


def _run_config(path: Optional[str]) -> RunConfig:
    return load_run_config(path) if path else apply_env(RunConfig())


def _gen_workload(args) -> None:
    cfg = _run_config(args.config)
    ds = ensure_dataset(args.data)
    traces = generate_workload(cfg.workload, ds)
    Path(args.out).write_text(dumps_jsonl(traces))
    log.info("wrote %d request traces to %s", len(traces), args.out)


def _run(args) -> None:
    cfg = _run_config(args.config)
    ds = ensure_dataset(args.data)
    index = ensure_index(args.index, ds, _index_params(args))
    traces = loads_jsonl(Path(args.workload).read_text()) if args.workload else None
    result = run(cfg, index, ds, traces=traces, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(result.summary_json())
    (out / "events.jsonl").write_text(result.events_jsonl())
    (out / "config.json").write_text(dumps(cfg))
    if args.trace:
        (out / "iterations.jsonl").write_text(result.iterations_jsonl())
    print(result.summary_json(), end="")


def _index_params(args) -> IndexParams:
    return IndexParams(args.M, args.ef_construction, args.index_seed)


def _matrix(args) -> None:
    if bool(args.spec) == bool(args.preset):
        raise AgentSimError("give exactly one of --spec or --preset")
    if args.spec:
        spec: ExperimentSpec = load_experiment(args.spec)
        if args.workers:
            spec = replace(spec, workers=args.workers)
    else:
        if not args.data:
            raise AgentSimError("--preset needs --data")
        spec = apply_env(preset(args.preset, args.data, args.out, args.index, args.workers or 1))
    results = run_matrix(spec, args.out)
    log.info("%d runs -> %s", len(results), args.out)
    print((Path(args.out) / f"{spec.name.lower()}.csv").read_text(), end="")


def _report(args) -> None:
    base = json.loads(Path(args.baseline).read_text())
    cand = json.loads(Path(args.candidate).read_text())
    table = compare_report(base, cand)
    text = format_report(table)
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=2) + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agentsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded Gaussian dataset (SAXV)")
    g.add_argument("--count", type=int, default=20_000)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--normalize", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_data)

    def index_opts(sp):
        sp.add_argument("--M", type=int, default=16)
        sp.add_argument("--ef-construction", type=int, default=100)

    b = sub.add_parser("build-index", help="build an HNSW index over a dataset")
    b.add_argument("--data", required=True)
    index_opts(b)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_build_index)

    w = sub.add_parser("gen-workload", help="write request traces as JSON lines")
    w.add_argument("--data", required=True)
    w.add_argument("--config", help="RunConfig JSON; its workload section is used")
    w.add_argument("--out", required=True)
    w.set_defaults(func=_gen_workload)

    r = sub.add_parser("run", help="simulate one RunConfig")
    r.add_argument("--config")
    r.add_argument("--data", required=True)
    r.add_argument("--index", required=True, help="built here if missing")
    index_opts(r)
    r.add_argument("--index-seed", type=int, default=0)
    r.add_argument("--workload", help="trace JSONL; generated from the config if omitted")
    r.add_argument("--workers", type=int, default=1, help="threads for ANN searches")
    r.add_argument("--trace", action="store_true", help="also write iterations.jsonl")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=_run)

    m = sub.add_parser("matrix", help="run an ExperimentSpec or a built-in preset")
    m.add_argument("--spec")
    m.add_argument("--preset", choices=sorted(PRESETS))
    m.add_argument("--data")
    m.add_argument("--index")
    m.add_argument("--workers", type=int, default=None, help="parallel runs")
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=_matrix)

    c = sub.add_parser("report", help="candidate/baseline ratio table for two summaries")
    c.add_argument("--baseline", required=True)
    c.add_argument("--candidate", required=True)
    c.add_argument("--out", help="write the table as JSON here")
    c.set_defaults(func=_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (AgentSimError, OSError, json.JSONDecodeError) as exc:
        print(f"agentsim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
