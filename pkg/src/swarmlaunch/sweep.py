"""Doubling-sweep experiment driver and launch metrics.

A sweep first grows the node count with one instance per node, then holds
the node count and grows the instances per node. Each point is run cold on a
fresh scheduler and reduced to three numbers:

* copy time:   latest staged instant minus earliest submit
* launch time: latest ready instant minus earliest submit
* launch rate: instances / launch time
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .adapters import AdapterKind, AdapterSpec, make_adapter
from .core import ClusterSpec, LaunchRecord, SwarmlaunchError, TaskState, VirtualClock, WallClock
from .mapreduce import JobTemplate, generate_array_job, scan_inputs
from .scheduler import SchedulerEvent, run_to_completion
from .staging import FileStager, PayloadManifest, SimulatedStager

log = logging.getLogger(__name__)

REPORT_HEADER = ["total_instances", "copy_time_s", "launch_time_s", "launch_rate_per_s"]
OVERLAY_REQUIRED = ["instances", "launch_time", "source"]
COMPARISON_HEADER = ["instances", "source", "launch_time_s", "launch_rate_per_s"]
OWN_SOURCE = "swarmlaunch"


class SweepError(SwarmlaunchError):
    pass


class NotPowerOfTwo(SweepError):
    pass


class PointOverCapacity(SweepError):
    pass


class NoRecords(SweepError):
    pass


class MissingTimestamps(SweepError):
    pass


class UnwritableDestination(SweepError):
    pass


class MalformedOverlay(SweepError):
    def __init__(self, path, problem: str, column: str | None = None):
        self.column = column
        super().__init__(f"{path}: {problem}")


def is_power_of_two(n: int) -> bool:
    return isinstance(n, int) and n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class SweepPoint:
    node_count: int
    instances_per_node: int

    @property
    def total_instances(self) -> int:
        return self.node_count * self.instances_per_node


def generate_schedule(max_nodes: int, max_per_node: int) -> list[SweepPoint]:
    """(1,1), (2,1), ..., (max_nodes,1), (max_nodes,2), ..., (max_nodes,max_per_node)."""
    bad = [name for name, v in (("max_nodes", max_nodes), ("max_per_node", max_per_node)) if not is_power_of_two(v)]
    if bad:
        raise NotPowerOfTwo(", ".join(f"{b} must be a power of two >= 1" for b in bad))
    points = []
    n = 1
    while n <= max_nodes:
        points.append(SweepPoint(n, 1))
        n *= 2
    k = 2
    while k <= max_per_node:
        points.append(SweepPoint(max_nodes, k))
        k *= 2
    return points


@dataclass(frozen=True)
class Metrics:
    count: int
    copy_time: float
    launch_time: float
    launch_rate: float


def compute_metrics(records: Sequence[LaunchRecord]) -> Metrics:
    if not records:
        raise NoRecords("no launch records")
    missing = [r.task_id for r in records if r.ready_ts is None or r.staged_ts is None]
    if missing:
        raise MissingTimestamps(f"{len(missing)} record(s) never became ready, e.g. task {missing[0]}")
    start = min(r.submit_ts for r in records)
    copy_time = max(r.staged_ts for r in records) - start
    launch_time = max(r.ready_ts for r in records) - start
    rate = len(records) / launch_time if launch_time > 0 else math.inf
    return Metrics(len(records), copy_time, launch_time, rate)


@dataclass(frozen=True)
class SweepRow:
    point: SweepPoint
    copy_time: float
    launch_time: float
    launch_rate: float
    completed: int
    failed: int

    @property
    def total_instances(self) -> int:
        return self.point.total_instances


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    traces: list[list[SchedulerEvent]] = field(default_factory=list)

    @property
    def failed(self) -> int:
        return sum(r.failed for r in self.rows)


def _check_capacity(schedule: Sequence[SweepPoint], cluster: ClusterSpec, slots_per_task: int) -> None:
    for p in schedule:
        if p.node_count > len(cluster.nodes):
            raise PointOverCapacity(f"point needs {p.node_count} nodes, cluster has {len(cluster.nodes)}")
        have = cluster.prefix(p.node_count).total_slots
        if p.total_instances * slots_per_task > have:
            raise PointOverCapacity(
                f"{p.total_instances} instances need {p.total_instances * slots_per_task} slots, "
                f"first {p.node_count} nodes have {have}"
            )


def run_sweep(
    schedule: Sequence[SweepPoint],
    cluster: ClusterSpec,
    adapter: AdapterSpec,
    template: JobTemplate,
    payload: PayloadManifest,
    *,
    seed: int = 0,
    warm_cache: bool = False,
    ready_timeout: float | None = None,
    scratch_root: str | os.PathLike | None = None,
    progress: Callable[[SweepRow], None] | None = None,
) -> SweepReport:
    """Run every point in order, each on a prefix of the cluster's nodes."""
    _check_capacity(schedule, cluster, template.slots_per_task)
    simulated = adapter.kind is AdapterKind.SIMULATED
    own_scratch = None
    if not simulated and scratch_root is None:
        own_scratch = scratch_root = tempfile.mkdtemp(prefix="swarmlaunch-sweep-")
    shared_stager = None

    report = SweepReport(
        metadata={
            "adapter": adapter.to_dict(),
            "cluster": {
                "nodes": len(cluster.nodes),
                "slots_per_node": sorted({n.slots for n in cluster.nodes}),
                "store_bandwidth": cluster.central_store.aggregate_bandwidth,
            },
            "seed": seed,
            "warm_cache": warm_cache,
            "payload": {"digest": payload.digest, "total_bytes": payload.total_bytes},
            "template": list(template.command),
            "schedule": [[p.node_count, p.instances_per_node] for p in schedule],
        }
    )
    try:
        for i, point in enumerate(schedule):
            sub = cluster.prefix(point.node_count)
            clock = VirtualClock() if simulated else WallClock()
            if simulated:
                stager = shared_stager if warm_cache and shared_stager else SimulatedStager(cluster.central_store)
            else:
                root = Path(scratch_root) / ("warm" if warm_cache else f"point-{i:02d}")
                stager = shared_stager if warm_cache and shared_stager else FileStager(root)
                if not warm_cache:
                    stager.clear()
            shared_stager = stager
            job = generate_array_job(
                scan_inputs(f"count:{point.total_instances}"), template, payload, submit_time=clock.now()
            )
            state, records = run_to_completion(
                job, sub, make_adapter(adapter, seed), clock, stager, ready_timeout=ready_timeout
            )
            ready = [r for r in records if r.ready_ts is not None]
            failed = sum(1 for r in records if r.outcome is TaskState.FAILED)
            if ready:
                m = compute_metrics(ready)
                row = SweepRow(point, m.copy_time, m.launch_time, m.launch_rate, len(records) - failed, failed)
            else:
                row = SweepRow(point, math.nan, math.nan, math.nan, 0, failed)
            report.rows.append(row)
            report.traces.append(state.trace)
            log.info(
                "point %d/%d: %d instances on %d nodes, launch %.3f s, %d failed",
                i + 1, len(schedule), point.total_instances, point.node_count, row.launch_time, failed,
            )
            if progress:
                progress(row)
    finally:
        if own_scratch:
            shutil.rmtree(own_scratch, ignore_errors=True)
    report.metadata["failed_per_point"] = [r.failed for r in report.rows]
    return report


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def load_overlay(path: str | os.PathLike) -> list[dict]:
    """Read a baseline CSV with columns instances, launch_time, source (launch_rate optional)."""
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            for col in OVERLAY_REQUIRED:
                if col not in header:
                    raise MalformedOverlay(path, f"missing required column '{col}'", col)
            rows = []
            for lineno, raw in enumerate(reader, start=2):
                try:
                    inst = int(float(raw["instances"]))
                    lt = float(raw["launch_time"])
                    rate = float(raw["launch_rate"]) if raw.get("launch_rate") not in (None, "") else inst / lt
                except (TypeError, ValueError, ZeroDivisionError):
                    raise MalformedOverlay(path, f"line {lineno}: non-numeric value") from None
                rows.append({"instances": inst, "source": raw["source"], "launch_time_s": lt, "launch_rate_per_s": rate})
    except OSError as e:
        raise MalformedOverlay(path, f"cannot read: {e}") from None
    return rows


def merge_overlays(rows: Sequence[tuple[int, float, float]], overlays: Sequence[list[dict]]) -> list[dict]:
    """Long-format comparison table keyed by instance count, own rows first within each count."""
    merged = [
        {"instances": n, "source": OWN_SOURCE, "launch_time_s": lt, "launch_rate_per_s": rate} for n, lt, rate in rows
    ]
    for ov in overlays:
        merged.extend(ov)
    return sorted(merged, key=lambda r: (r["instances"], r["source"] != OWN_SOURCE, r["source"]))


def write_comparison(merged: Sequence[dict], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for r in merged:
            w.writerow([r["instances"], r["source"], _fmt(r["launch_time_s"]), _fmt(r["launch_rate_per_s"])])


def emit_report(
    report: SweepReport,
    destination: str | os.PathLike,
    overlays: Sequence[str | os.PathLike] = (),
) -> list[Path]:
    """Write report.csv, events.log, meta.json and, with overlays, comparison.csv."""
    if not report.rows:
        raise SweepError("cannot emit an empty report")
    loaded = [load_overlay(p) for p in overlays]
    out = Path(destination)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        p = out / "report.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in report.rows:
                w.writerow([r.total_instances, _fmt(r.copy_time), _fmt(r.launch_time), _fmt(r.launch_rate)])
        written.append(p)

        p = out / "events.log"
        with open(p, "w") as f:
            for row, trace in zip(report.rows, report.traces):
                f.write(
                    f"# point nodes={row.point.node_count} per_node={row.point.instances_per_node} "
                    f"total={row.total_instances}\n"
                )
                for ev in trace:
                    f.write(ev.to_line() + "\n")
        written.append(p)

        p = out / "meta.json"
        p.write_text(json.dumps(report.metadata, indent=2, sort_keys=True) + "\n")
        written.append(p)

        if loaded:
            p = out / "comparison.csv"
            own = [(r.total_instances, r.launch_time, r.launch_rate) for r in report.rows]
            write_comparison(merge_overlays(own, loaded), p)
            written.append(p)
    except OSError as e:
        raise UnwritableDestination(f"cannot write report to {out}: {e}") from None
    return written


def load_report_rows(path: str | os.PathLike) -> list[tuple[int, float, float, float]]:
    """Read a report.csv back as (total_instances, copy_time, launch_time, launch_rate) tuples."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != REPORT_HEADER:
            raise SweepError(f"{path}: not a report.csv (header {reader.fieldnames})")
        return [
            (int(r["total_instances"]), float(r["copy_time_s"]), float(r["launch_time_s"]), float(r["launch_rate_per_s"]))
            for r in reader
        ]
