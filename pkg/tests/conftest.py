from __future__ import annotations

import shutil
import sys
from pathlib import Path

import pytest

from swarmlaunch import testchild
from swarmlaunch.adapters import InstanceHandle, ReadyTimeout, SpawnFailed
from swarmlaunch.core import ClusterSpec, NodeSpec, ReduceSpec, StoreSpec, TaskState
from swarmlaunch.mapreduce import JobTemplate, attach_reduce, generate_array_job, scan_inputs
from swarmlaunch.staging import StageResult, aggregate_copy_time, synthetic_manifest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import Instance  # noqa: E402


class TableAdapter:
    """Virtual adapter whose per-task timings and outcomes come from a table."""

    virtual = True

    def __init__(self, inst: Instance):
        self.inst = inst

    def launch(self, task, node_id, workdir, clock):
        plan = self.inst.plans[task.task_id]
        if plan.outcome == "spawn_fail":
            raise SpawnFailed(task.task_id, "table says so")
        return InstanceHandle(task.task_id, node_id, clock.now(), plan)

    def await_ready(self, handle, timeout, clock):
        if handle.backend.outcome == "timeout":
            raise ReadyTimeout(handle.task_id, handle.spawn_time + self.inst.timeout, exited=False)
        return handle.spawn_time + handle.backend.latency

    def wait_exit(self, handle, clock):
        plan = handle.backend
        end = handle.spawn_time + plan.latency + plan.run
        return (TaskState.COMPLETED if plan.outcome == "ok" else TaskState.FAILED), end

    def kill(self, handle):
        pass

    def run_reduce(self, reduce, clock):
        return 0


class TableStager:
    def __init__(self, inst: Instance):
        self.inst = inst
        self.index = {nid: i for i, nid in enumerate(inst.node_ids)}

    def stage_all(self, manifest, nodes, clock):
        now = clock.now()
        out = []
        for n in nodes:
            i = self.index[n.node_id]
            err = None if self.inst.stage_ok[i] else "table says so"
            out.append(StageResult(n.node_id, now, now + self.inst.stage_time[i], 0, False, f"table://{i}", err))
        return out, aggregate_copy_time(out)

    def stage_to_node(self, manifest, node, clock):
        now = clock.now()
        i = self.index[node.node_id]
        return StageResult(node.node_id, now, now + self.inst.cache_hit_time[i], 0, True, f"table://{i}")


def instance_job_and_cluster(inst: Instance):
    cluster = ClusterSpec(
        nodes=tuple(NodeSpec(nid, slots=s) for nid, s in zip(inst.node_ids, inst.slots)),
        central_store=StoreSpec(),
    )
    template = JobTemplate(("app", "{input}"), slots_per_task=inst.demand)
    job = generate_array_job(scan_inputs(f"count:{len(inst.plans)}"), template, synthetic_manifest(1000))
    if inst.reduce:
        job = attach_reduce(job, ReduceSpec(("reduce",)))
    return job, cluster


@pytest.fixture
def child_payload(tmp_path) -> Path:
    d = tmp_path / "payload"
    d.mkdir()
    shutil.copyfile(testchild.__file__, d / "testchild.py")
    return d


@pytest.fixture
def child_cmd():
    def make(*flags: str) -> tuple[str, ...]:
        return (sys.executable, "-I", "-S", "testchild.py", *flags, "--input", "{input}")

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
