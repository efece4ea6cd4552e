"""Command-line driver: run, diff, sweep, explore and node.

Exit codes: 0 success (failed jobs included), 1 internal error,
2 invalid input (config, arguments, fixtures, missing directories).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from sandmesh.config import ExperimentConfig
from sandmesh.forensics import HOST_COPY_STAT, VOLATILE_STAT, canonical_json, diff, emit_report, \
    extract_artifacts, snapshot
from sandmesh.mesh import Mesh, NodeStats
from sandmesh.perfmodel import (
    NODE_BASE_LOAD,
    NODE_BASE_RAM_USED_MB,
    NODE_RAM_MB,
    PerfReport,
    simulate_run,
    sweep,
    sweep_csv,
    theoretical_runtime,
)
from sandmesh.sandbox import ConfigError
from sandmesh.scheduler import Job, JobResult, JobState, Scheduler
from sandmesh.uiexplore import ExploreConfig, GraphError, UiGraph, coverage, explore

log = logging.getLogger("sandmesh")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad arguments or inputs; reported without a traceback, exit 2."""


# -- run --------------------------------------------------------------------------


@dataclass
class RunOutcome:
    report: PerfReport
    results: list[JobResult]
    transitions: list[dict[str, Any]]


def execute(cfg: ExperimentConfig, workers: int | None = None) -> RunOutcome:
    """Simulated cluster run, or per-job local runs on `workers` threads."""
    if not workers:
        rep = simulate_run(cfg.cluster, cfg.workload, cfg.comm, cfg.ip_fail_prob, cfg.seed,
                           schedule=cfg.schedule, fixtures=cfg.fixtures, explore_cfg=cfg.explore,
                           keep_results=True)
        return RunOutcome(rep, rep.results, rep.transitions)

    def one(job: Job) -> tuple[JobResult, list[dict[str, Any]], float]:
        # a private single-node mesh per job; timestamps are job-relative
        mesh = Mesh(cfg.comm.transport())
        mesh.join(NodeStats("local", NODE_RAM_MB, NODE_RAM_MB - NODE_BASE_RAM_USED_MB,
                            NODE_BASE_LOAD, 0, cfg.schedule.max_vms_per_node))
        sched = Scheduler(mesh, cfg.schedule, cfg.fixtures, ip_fail_prob=cfg.ip_fail_prob,
                          seed=cfg.seed, explore_cfg=cfg.explore)
        [res] = sched.schedule_all([job])
        return res, sched.transitions, mesh.head_busy_s

    jobs = cfg.workload.jobs()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        done = list(pool.map(one, jobs))
    results = [r for r, _, _ in done]
    transitions = [t for _, ts, _ in done for t in ts]
    wall = max((t["timestamp_s"] for t in transitions), default=0.0)
    n_done = sum(1 for r in results if r.state is JobState.DONE)
    rep = PerfReport(1, wall, sum(c for _, _, c in done), n_done, len(results) - n_done,
                     sum(r.attempts for r in results), results=results, transitions=transitions)
    return RunOutcome(rep, results, transitions)


def write_run(outcome: RunOutcome, cfg: ExperimentConfig, out: Path) -> dict[str, Any]:
    """Write the run tree under `out` and return the manifest document."""
    (out / "reports").mkdir(parents=True)
    with open(out / "transitions.ndjson", "w", encoding="utf-8", newline="\n") as fh:
        for entry in outcome.transitions:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    for res in outcome.results:
        _write_text(out / "reports" / f"{res.job_id}.json", canonical_json(res.report()) + "\n")
        for path, content in res.artifacts.items():
            dest = out / "artifacts" / res.job_id / path.lstrip("/")
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(content)
    rep = outcome.report
    summary = {
        "seed": cfg.seed,
        "n_nodes": rep.n_nodes,
        "jobs": rep.n_jobs,
        "jobs_done": rep.jobs_done,
        "jobs_failed": rep.jobs_failed,
        "jobs_dispatched": rep.jobs_dispatched,
        "wall_time_s": round(rep.wall_time_s, 6),
        "comm_time_s": round(rep.comm_time_s, 6),
        "comm_fraction": round(rep.comm_fraction, 6),
        "throughput_per_hour": round(rep.throughput_per_hour, 3),
    }
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files = []
    for p in sorted(q for q in out.rglob("*") if q.is_file()):
        rel = p.relative_to(out).as_posix()
        if rel == MANIFEST:
            continue
        data = p.read_bytes()
        files.append({"path": rel, "sha256": hashlib.sha256(data).hexdigest(), "size": len(data)})
    manifest = {"files": files, "jobs": {r.job_id: r.state.value for r in outcome.results}}
    _write_text(out / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _write_text(path: Path, text: str) -> None:
    path.write_bytes(text.encode("utf-8"))


def _prepare_outdir(out: Path, force: bool) -> None:
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to replace a previous run)")
        if not (out / MANIFEST).is_file():
            raise UsageError(f"refusing to replace {out}: it has no {MANIFEST}, so it is not a run directory")
        shutil.rmtree(out)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out) if args.out else cfg.output_dir or Path(f"{Path(args.config).stem}-run")
    _prepare_outdir(out, args.force)
    if args.workers is not None and args.workers < 1:
        raise UsageError("--workers must be >= 1")
    outcome = execute(cfg, args.workers)
    write_run(outcome, cfg, out)
    rep = outcome.report
    print(f"{rep.n_jobs} jobs: {rep.jobs_done} done, {rep.jobs_failed} failed; "
          f"wall {rep.wall_time_s:.1f} s; output in {out}")
    return EXIT_OK


# -- diff -------------------------------------------------------------------------


def cmd_diff(args: argparse.Namespace) -> int:
    for d in (args.base, args.post):
        if not Path(d).is_dir():
            raise UsageError(f"not a readable directory: {d}")
    ignore = VOLATILE_STAT if args.strict_stat else HOST_COPY_STAT
    d = diff(snapshot(args.base), snapshot(args.post), ignore_stat=ignore)
    contents = extract_artifacts(d, args.post)
    doc = emit_report(d, job_id=args.job_id, contents=contents)
    sys.stdout.write(canonical_json(doc) + "\n")
    return EXIT_OK


# -- sweep ------------------------------------------------------------------------


def parse_nodes(text: str) -> list[int]:
    try:
        nodes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"invalid node list {text!r}: expected comma-separated integers") from None
    if not nodes or any(n < 1 for n in nodes):
        raise UsageError(f"invalid node list {text!r}: need at least one positive count")
    return nodes


def cmd_sweep(args: argparse.Namespace) -> int:
    nodes = parse_nodes(args.nodes)
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out) if args.out else Path(f"{Path(args.config).stem}-sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep(nodes, cfg.cluster, cfg.workload, cfg.comm, cfg.ip_fail_prob, cfg.seed,
                 baseline_count=args.baseline, schedule=cfg.schedule, fixtures=cfg.fixtures,
                 explore_cfg=cfg.explore)
    _write_text(out / "sweep.csv", sweep_csv(rows))
    figures = []
    if not args.no_figures:
        from sandmesh.plots import render_sweep_figures
        figures = render_sweep_figures(rows, out)

    w = cfg.workload
    top = rows[-1]
    vms = cfg.cluster.vms_per_node
    t_stim = theoretical_runtime(w.n_jobs, top.n_nodes, vms, w.stimulate_s)
    t_full = theoretical_runtime(w.n_jobs, top.n_nodes, vms, w.per_job_service_s)
    wall = top.report.wall_time_s
    print(f"theoretical runtime, stimulation only ({top.n_nodes} nodes): {t_stim:.1f} s ({_mmss(t_stim)})")
    print(f"theoretical runtime, with fixed waits ({top.n_nodes} nodes): {t_full:.1f} s ({_mmss(t_full)})")
    print(f"simulated wall time ({top.n_nodes} nodes): {wall:.1f} s ({_mmss(wall)})")
    print(f"throughput ({top.n_nodes} nodes): {top.report.throughput_per_hour:.0f} jobs/hour")
    for row in rows:
        print(f"comm fraction ({row.n_nodes} nodes): {row.report.comm_fraction:.4f}")
    print(f"wrote {out / 'sweep.csv'}" + "".join(f", {p.name}" for p in figures))
    return EXIT_OK


def _mmss(seconds: float) -> str:
    m, s = divmod(int(round(seconds)), 60)
    return f"{m}m {s:02d}s"


# -- explore ----------------------------------------------------------------------


def cmd_explore(args: argparse.Namespace) -> int:
    from sandmesh.fixtures import resolve

    if args.budget < 0:
        raise UsageError("--budget must be non-negative")
    try:
        graph = UiGraph.load(resolve(args.graph))
    except (GraphError, ConfigError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed UI graph {args.graph}: {exc}") from exc
    ecfg = ExploreConfig(tuple(args.input) if args.input else ExploreConfig.inputs, args.policy)
    record = explore(graph, args.budget, ecfg)
    states, elements = coverage(record, graph)
    doc = {"record": record.to_json(), "coverage": {"states": states, "elements": elements}}
    sys.stdout.write(canonical_json(doc) + "\n")
    return EXIT_OK


# -- node -------------------------------------------------------------------------


def cmd_node(args: argparse.Namespace) -> int:
    from sandmesh.transport import NodeServer, local_stats, parse_addr

    try:
        addr = parse_addr(args.listen)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    node_id = args.node_id or f"node@{args.listen}"
    server = NodeServer(addr, lambda: local_stats(node_id, args.max_vms))
    print(f"{node_id} listening on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sandmesh", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config and write its output tree")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: config output_dir or <config>-run)")
    r.add_argument("--force", action="store_true", help="replace an existing run directory")
    r.add_argument("--workers", type=int, help="run jobs locally on N threads instead of the simulated cluster")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("diff", help="diff two directory trees and print a report")
    d.add_argument("base")
    d.add_argument("post")
    d.add_argument("--job-id", default="diff")
    d.add_argument("--strict-stat", action="store_true",
                   help="also compare inode, device, link count, ctime and block fields")
    d.set_defaults(func=cmd_diff)

    s = sub.add_parser("sweep", help="strong-scaling sweep over node counts")
    s.add_argument("config")
    s.add_argument("--nodes", required=True, help="comma-separated node counts, e.g. 20,40,188")
    s.add_argument("--out", help="output directory (default: <config>-sweep)")
    s.add_argument("--baseline", type=int, help="node count speedup is measured against (default: smallest)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("explore", help="explore a UI graph fixture")
    e.add_argument("graph", help="path or builtin:<name>")
    e.add_argument("--budget", type=int, default=100)
    e.add_argument("--policy", choices=("first", "cycle"), default="first")
    e.add_argument("--input", action="append", help="typed input string (repeatable)")
    e.set_defaults(func=cmd_explore)

    n = sub.add_parser("node", help="serve this machine's stats to a head node over TCP")
    n.add_argument("--listen", required=True, help="host:port")
    n.add_argument("--node-id")
    n.add_argument("--max-vms", type=int, default=3)
    n.set_defaults(func=cmd_node)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"sandmesh {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"sandmesh {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
