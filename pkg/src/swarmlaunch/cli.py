"""``swarmlaunch`` command line: run, stage, sweep, report.

Exit codes: 0 success, 1 at least one task failed, 2 usage or configuration error.
Every referenced file is loaded and validated before any staging or
scheduling starts.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shlex
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import testchild
from .adapters import AdapterConfigError, AdapterKind, AdapterSpec, make_adapter, parse_adapter
from .core import (
    ClusterSpec,
    ConfigError,
    ReduceSpec,
    SwarmlaunchError,
    TaskState,
    VirtualClock,
    WallClock,
    load_cluster,
    validate_cluster,
)
from .mapreduce import (
    JobTemplate,
    SourceUnreadable,
    TemplateError,
    attach_reduce,
    generate_array_job,
    load_template,
    render_script,
    scan_inputs,
)
from .scheduler import default_scratch_root, format_trace, run_to_completion
from .staging import FileStager, SimulatedStager, StagingError, build_manifest, synthetic_manifest
from .sweep import (
    MalformedOverlay,
    NotPowerOfTwo,
    SweepError,
    compute_metrics,
    emit_report,
    generate_schedule,
    load_overlay,
    load_report_rows,
    merge_overlays,
    run_sweep,
    write_comparison,
)

log = logging.getLogger("swarmlaunch")

DEFAULT_SEED = 0
SIM_PAYLOAD_BYTES = 5_000_000


class UsageError(SwarmlaunchError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class CliConfig:
    command: str
    cluster: ClusterSpec | None = None
    adapter: AdapterSpec | None = None
    seed: int = DEFAULT_SEED
    verbosity: int = 0
    paths: dict[str, Path] = field(default_factory=dict)
    options: dict[str, Any] = field(default_factory=dict)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarmlaunch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="{run,stage,sweep,report}")
    sub.required = True

    def cluster_and_adapter(sp, cluster_default=None):
        sp.add_argument("--cluster", default=cluster_default, help="preset name (txgreen-like, desk) or JSON file")
        sp.add_argument("--adapter", default="sim", help="sim | proc | prefix:CMD")
        sp.add_argument("--seed", default=str(DEFAULT_SEED))
        g = sp.add_argument_group("simulated adapter")
        g.add_argument("--latency-median", default=None)
        g.add_argument("--latency-dispersion", default=None)
        g.add_argument("--serial-increment", default=None)
        g.add_argument("--run-for", default=None)
        g.add_argument("--failure-rate", default=None)
        g = sp.add_argument_group("process adapters")
        g.add_argument("--setup-cmd", default=None, help="command run in the staged directory before each spawn")
        g.add_argument("--ready-timeout", default=None, help="seconds to wait for the readiness sentinel")
        g.add_argument("--scratch-root", default=None, help="overrides $SWARMLAUNCH_SCRATCH")

    sp = sub.add_parser("run", help="run one map-reduce array job")
    sp.add_argument("--inputs", required=True, help="input directory or count:N")
    sp.add_argument("--template", required=True, help="command template file containing {input}")
    sp.add_argument("--payload", required=True, help="payload directory to stage")
    sp.add_argument("--reduce", default=None, help="command to run once after all tasks succeed")
    sp.add_argument("--out", default=None, help="directory for records.csv, events.log and job.sh")
    cluster_and_adapter(sp, "desk")

    sp = sub.add_parser("stage", help="stage a payload to every node and report copy times")
    sp.add_argument("--payload", required=True)
    sp.add_argument("--manifest-out", default=None)
    cluster_and_adapter(sp, "desk")

    sp = sub.add_parser("sweep", help="run the doubling launch sweep")
    sp.add_argument("--max-nodes", default=None)
    sp.add_argument("--max-per-node", default=None)
    sp.add_argument("--overlay", action="append", default=[], help="baseline CSV (instances,launch_time,source)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--warm-cache", action="store_true", help="keep staged payloads between points")
    sp.add_argument("--template", default=None)
    sp.add_argument("--payload", default=None)
    sp.add_argument("--ready-after", default="0.1", help="readiness delay for the bundled test child")
    cluster_and_adapter(sp, None)

    sp = sub.add_parser("report", help="re-emit a report.csv merged with baseline overlays")
    sp.add_argument("--in", dest="source", required=True, help="report.csv or a sweep output directory")
    sp.add_argument("--overlay", action="append", default=[])
    sp.add_argument("--out", required=True)
    return p


def _num(problems: list[str], flag: str, text: str | None, kind=float, minimum=None):
    if text is None:
        return None
    try:
        v = kind(text)
    except ValueError:
        problems.append(f"{flag}: expected a number, got {text!r}")
        return None
    if minimum is not None and v < minimum:
        problems.append(f"{flag}: must be >= {minimum}")
        return None
    return v


def _adapter(problems: list[str], ns) -> AdapterSpec | None:
    params: dict[str, Any] = {}
    for flag, attr, key in (
        ("--latency-median", "latency_median", "latency_median"),
        ("--latency-dispersion", "latency_dispersion", "latency_dispersion"),
        ("--serial-increment", "serial_increment", "serial_increment"),
        ("--run-for", "run_for", "run_duration"),
        ("--failure-rate", "failure_rate", "failure_rate"),
    ):
        v = _num(problems, flag, getattr(ns, attr), float, 0.0)
        if v is not None:
            params[key] = v
    if ns.setup_cmd:
        params["setup_command"] = tuple(shlex.split(ns.setup_cmd))
    try:
        spec = parse_adapter(ns.adapter, **params)
    except AdapterConfigError as e:
        problems.append(f"--adapter: {e}")
        return None
    return spec


def _cluster(problems: list[str], ref: str) -> ClusterSpec | None:
    try:
        cluster = load_cluster(ref)
    except ConfigError as e:
        problems.append(f"--cluster: {e}")
        return None
    violations = validate_cluster(cluster)
    if violations:
        problems.append("--cluster: " + ", ".join(str(v) for v in violations))
        return None
    return cluster


def _bundled_child_payload() -> Path:
    d = Path(tempfile.mkdtemp(prefix="swarmlaunch-payload-"))
    shutil.copyfile(testchild.__file__, d / "testchild.py")
    return d


def parse_and_validate(argv: list[str] | None = None) -> CliConfig:
    """Parse argv and load everything it references. Raises UsageError listing every problem."""
    ns = build_parser().parse_args(argv)
    problems: list[str] = []
    cfg = CliConfig(command=ns.command, verbosity=ns.verbose)

    if ns.command == "report":
        src = Path(ns.source)
        if src.is_dir():
            src = src / "report.csv"
        try:
            cfg.options["rows"] = load_report_rows(src)
        except (OSError, SweepError, ValueError, KeyError) as e:
            problems.append(f"--in: {e}")
        cfg.options["overlays"] = _overlays(problems, ns.overlay)
        if not ns.overlay:
            problems.append("--overlay: at least one overlay is required")
        cfg.paths["out"] = Path(ns.out)
        if problems:
            raise UsageError(problems)
        return cfg

    seed = _num(problems, "--seed", ns.seed, int)
    cfg.seed = DEFAULT_SEED if seed is None else seed
    cfg.adapter = _adapter(problems, ns)
    simulated = cfg.adapter is not None and cfg.adapter.kind is AdapterKind.SIMULATED
    cfg.options["ready_timeout"] = _num(problems, "--ready-timeout", ns.ready_timeout, float, 0.0)
    if cfg.options["ready_timeout"] is None and not simulated:
        cfg.options["ready_timeout"] = 60.0
    scratch = ns.scratch_root or os.environ.get("SWARMLAUNCH_SCRATCH")
    cfg.paths["scratch"] = Path(scratch) if scratch else Path(default_scratch_root())

    cluster_ref = ns.cluster or ("txgreen-like" if simulated else "desk")
    cfg.cluster = _cluster(problems, cluster_ref)
    cfg.options["cluster_ref"] = cluster_ref

    if ns.command in ("run", "stage") or (ns.command == "sweep" and ns.payload):
        try:
            cfg.options["payload"] = build_manifest(ns.payload)
        except StagingError as e:
            problems.append(f"--payload: {e}")

    if ns.command == "run":
        try:
            cfg.options["inputs"] = scan_inputs(ns.inputs)
            if not cfg.options["inputs"]:
                problems.append(f"--inputs: {ns.inputs} holds no inputs")
        except SourceUnreadable as e:
            problems.append(f"--inputs: {e}")
        try:
            cfg.options["template"] = load_template(ns.template)
        except TemplateError as e:
            problems.append(f"--template: {e}")
        if ns.reduce:
            cfg.options["reduce"] = ReduceSpec(tuple(shlex.split(ns.reduce)))
        if ns.out:
            cfg.paths["out"] = Path(ns.out)

    elif ns.command == "stage":
        if ns.manifest_out:
            cfg.paths["manifest_out"] = Path(ns.manifest_out)

    elif ns.command == "sweep":
        max_nodes = _num(problems, "--max-nodes", ns.max_nodes, int)
        max_per = _num(problems, "--max-per-node", ns.max_per_node, int)
        if max_nodes is None and ns.max_nodes is None:
            max_nodes = 256 if simulated else 8
        if max_per is None and ns.max_per_node is None:
            max_per = 64 if simulated else 8
        if max_nodes is not None and max_per is not None:
            try:
                cfg.options["schedule"] = generate_schedule(max_nodes, max_per)
            except NotPowerOfTwo as e:
                problems.append(f"--max-nodes/--max-per-node: {e}")
        ready_after = _num(problems, "--ready-after", ns.ready_after, float, 0.0)
        if ns.template:
            try:
                cfg.options["template"] = load_template(ns.template)
            except TemplateError as e:
                problems.append(f"--template: {e}")
        elif simulated:
            cfg.options["template"] = JobTemplate(("APP.EXE", "{input}"))
        else:
            cfg.options["template"] = JobTemplate(
                (sys.executable, "-I", "-S", "testchild.py", "--ready-after", str(ready_after or 0.0), "--input", "{input}")
            )
        if "payload" not in cfg.options and not problems:
            if simulated:
                cfg.options["payload"] = synthetic_manifest(SIM_PAYLOAD_BYTES)
            else:
                cfg.paths["bundled_payload"] = _bundled_child_payload()
                cfg.options["payload"] = build_manifest(cfg.paths["bundled_payload"])
        cfg.options["overlays"] = ns.overlay
        _overlays(problems, ns.overlay)
        cfg.options["warm_cache"] = ns.warm_cache
        cfg.paths["out"] = Path(ns.out)

    if problems:
        raise UsageError(problems)
    return cfg


def _overlays(problems: list[str], paths: list[str]) -> list[list[dict]]:
    out = []
    for p in paths:
        try:
            out.append(load_overlay(p))
        except MalformedOverlay as e:
            problems.append(f"--overlay: {e}")
    return out


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def _clock_and_stager(cfg: CliConfig):
    if cfg.adapter.kind is AdapterKind.SIMULATED:
        return VirtualClock(), SimulatedStager(cfg.cluster.central_store)
    return WallClock(), FileStager(cfg.paths["scratch"])


def _cmd_run(cfg: CliConfig) -> int:
    o = cfg.options
    clock, stager = _clock_and_stager(cfg)
    adapter_spec = cfg.adapter
    job = generate_array_job(o["inputs"], o["template"], o["payload"], submit_time=clock.now())
    if o.get("reduce"):
        job = attach_reduce(job, o["reduce"])
    state, records = run_to_completion(
        job, cfg.cluster, make_adapter(adapter_spec, cfg.seed), clock, stager, ready_timeout=o["ready_timeout"]
    )
    out = cfg.paths.get("out")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "job.sh").write_text(render_script(job))
        (out / "events.log").write_text(format_trace(state.trace))
        with open(out / "records.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["task_id", "node_id", "submit_ts", "staged_ts", "spawn_ts", "ready_ts", "completed_ts", "outcome"])
            for r in records:
                w.writerow([r.task_id, r.node_id, r.submit_ts, r.staged_ts, r.spawn_ts, r.ready_ts, r.completed_ts,
                            r.outcome.value])
    failed = [r for r in records if r.outcome is TaskState.FAILED]
    ready = [r for r in records if r.ready_ts is not None]
    print(f"job {job.job_id}: {len(records)} tasks, {len(records) - len(failed)} completed, {len(failed)} failed")
    if ready:
        m = compute_metrics(ready)
        print(f"copy_time_s={m.copy_time:.6f} launch_time_s={m.launch_time:.6f} launch_rate_per_s={m.launch_rate:.6f}")
    if state.reduce_launched:
        print(f"reduce launched (exit code {state.reduce_exit_code})")
    if failed:
        _failure_summary(failed)
        return 1
    if state.reduce_exit_code not in (None, 0):
        print(f"reduce step exited {state.reduce_exit_code}", file=sys.stderr)
        return 1
    return 0


def _failure_summary(failed) -> None:
    print(f"{len(failed)} task(s) failed:", file=sys.stderr)
    for r in failed[:10]:
        print(f"  task {r.task_id} on {r.node_id or '-'}: {r.failure_reason}", file=sys.stderr)
    if len(failed) > 10:
        print(f"  ... and {len(failed) - 10} more", file=sys.stderr)


def _cmd_stage(cfg: CliConfig) -> int:
    clock, stager = _clock_and_stager(cfg)
    manifest = cfg.options["payload"]
    results, aggregate = stager.stage_all(manifest, list(cfg.cluster.nodes), clock)
    if "manifest_out" in cfg.paths:
        cfg.paths["manifest_out"].write_text(manifest.to_json())
    print(f"payload {manifest.digest[:16]} ({manifest.total_bytes} bytes) -> {len(results)} nodes")
    for r in results:
        status = "error: " + r.error if r.error else ("cache hit" if r.cache_hit else f"{r.bytes_moved} bytes")
        print(f"  {r.node_id}: {r.finished - r.started:.6f} s, {status}")
    print(f"aggregate_copy_time_s={aggregate:.6f}")
    return 1 if any(r.error for r in results) else 0


def _cmd_sweep(cfg: CliConfig) -> int:
    o = cfg.options
    try:
        report = _sweep(cfg)
    finally:
        if "bundled_payload" in cfg.paths:
            shutil.rmtree(cfg.paths["bundled_payload"], ignore_errors=True)
    report.metadata["cluster_ref"] = o["cluster_ref"]
    for path in emit_report(report, cfg.paths["out"], o["overlays"]):
        print(path)
    if report.failed:
        print(f"{report.failed} task(s) failed across the sweep: {report.metadata['failed_per_point']}", file=sys.stderr)
        return 1
    return 0


def _sweep(cfg: CliConfig):
    o = cfg.options
    return run_sweep(
        o["schedule"],
        cfg.cluster,
        cfg.adapter,
        o["template"],
        o["payload"],
        seed=cfg.seed,
        warm_cache=o["warm_cache"],
        ready_timeout=o["ready_timeout"],
        scratch_root=cfg.paths["scratch"] / "sweep" if cfg.adapter.kind is not AdapterKind.SIMULATED else None,
        progress=lambda row: log.info(
            "%6d instances: copy %.4f s, launch %.4f s, rate %.3f/s", row.total_instances, row.copy_time,
            row.launch_time, row.launch_rate,
        ),
    )


def _cmd_report(cfg: CliConfig) -> int:
    out = cfg.paths["out"]
    out.mkdir(parents=True, exist_ok=True)
    own = [(n, lt, rate) for n, _copy, lt, rate in cfg.options["rows"]]
    path = out / "comparison.csv"
    write_comparison(merge_overlays(own, cfg.options["overlays"]), path)
    print(path)
    return 0


def dispatch(cfg: CliConfig) -> int:
    handlers = {"run": _cmd_run, "stage": _cmd_stage, "sweep": _cmd_sweep, "report": _cmd_report}
    try:
        return handlers[cfg.command](cfg)
    except (ConfigError, SweepError) as e:
        print(f"swarmlaunch: {e}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = parse_and_validate(argv)
    except UsageError as e:
        print("swarmlaunch: invalid arguments:", file=sys.stderr)
        for p in e.problems:
            print(f"  {p}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.WARNING - 10 * min(cfg.verbosity, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
