import itertools
import random

import pytest

from conftest import TableAdapter, TableStager, instance_job_and_cluster
from oracles import deal_round_robin, oracle_trace, random_completions, random_instance
from swarmlaunch.adapters import AdapterKind, AdapterSpec, ProcessAdapter, SimulatedAdapter
from swarmlaunch.core import ClusterSpec, NodeSpec, ReduceSpec, StoreSpec, TaskState, VirtualClock, WallClock
from swarmlaunch.core import uniform_cluster
from swarmlaunch.mapreduce import JobTemplate, attach_reduce, generate_array_job, scan_inputs
from swarmlaunch.scheduler import (
    EventKind,
    InvalidCluster,
    SchedulerEvent,
    SchedulerState,
    TaskNotRunning,
    UnknownTask,
    format_trace,
    handle_completion,
    pack_tasks,
    run_to_completion,
    schedule_tick,
)
from swarmlaunch.staging import FileStager, SimulatedStager, build_manifest, synthetic_manifest

PAYLOAD = synthetic_manifest()
TEMPLATE = JobTemplate(("APP.EXE", "{input}"))


def make_job(n, reduce=False, slots_per_task=1):
    t = JobTemplate(("APP.EXE", "{input}"), slots_per_task=slots_per_task)
    job = generate_array_job(scan_inputs(f"count:{n}"), t, PAYLOAD)
    return attach_reduce(job, ReduceSpec(("reduce",))) if reduce else job


def cluster(*slots):
    return ClusterSpec(tuple(NodeSpec(f"n{i}", slots=s) for i, s in enumerate(slots)), StoreSpec())


def trace_tuples(trace):
    return [(e.time, e.kind.value, e.task_id, e.node_id) for e in trace]


def all_ready(n, reduce=True, nodes=(64,)):
    """A state whose n tasks have all been staged, launched and signalled ready at t=0."""
    st = SchedulerState(make_job(n, reduce), cluster(*nodes))
    for tid in range(n):
        st.mark_staged(tid, 0.0)
    st.tick(0.0)
    for tid in range(n):
        st.mark_ready(tid, 0.0)
    return st


# -- packing --------------------------------------------------------------------


def test_pack_five_on_two_by_four():
    a = pack_tasks(make_job(5), cluster(4, 4))
    assert sorted(t for t, n in a.items() if n == "n0") == [0, 2, 4]
    assert sorted(t for t, n in a.items() if n == "n1") == [1, 3]


def test_pack_full_scale():
    a = pack_tasks(make_job(16384), uniform_cluster(256, 64))
    counts = {}
    for n in a.values():
        counts[n] = counts.get(n, 0) + 1
    assert len(a) == 16384 and len(counts) == 256 and set(counts.values()) == {64}


def test_pack_single_task():
    assert pack_tasks(make_job(1), uniform_cluster(256, 64)) == {0: "node000"}


def test_pack_overflow_queues():
    a = pack_tasks(make_job(7), cluster(2, 3))
    assert len(a) == 5 and 5 not in a and 6 not in a


def test_pack_matches_card_dealing():
    rng = random.Random(11)
    for _ in range(500):
        slots = [rng.randint(1, 6) for _ in range(rng.randint(1, 5))]
        n, demand = rng.randint(1, 30), rng.randint(1, 3)
        got = pack_tasks(make_job(n, slots_per_task=demand), cluster(*slots))
        assert got == {t: f"n{i}" for t, i in deal_round_robin(n, slots, demand).items()}


# -- ticks ------------------------------------------------------------------------


def staged_state(n_tasks, assignment, slots):
    st = SchedulerState(make_job(n_tasks), cluster(*slots), assignment)
    for tid in assignment:
        st.mark_staged(tid, 0.0)
    return st


def test_tick_two_staged_two_slots():
    st = staged_state(2, {0: "n0", 1: "n0"}, [2])
    new, events = schedule_tick(st, 1.0)
    assert [(e.kind, e.task_id) for e in events] == [(EventKind.LAUNCHED, 0), (EventKind.LAUNCHED, 1)]
    assert {new.task(i).state for i in (0, 1)} == {TaskState.LAUNCHING}
    assert st.task(0).state is TaskState.STAGED  # pure: input untouched


def test_tick_three_staged_two_slots():
    st = staged_state(3, {0: "n0", 1: "n0", 2: "n0"}, [2])
    new, events = schedule_tick(st, 1.0)
    assert [e.task_id for e in events] == [0, 1]
    assert new.task(2).state is TaskState.STAGED


def test_tick_fixed_point():
    st = SchedulerState(make_job(2), cluster(2))
    new, events = schedule_tick(st, 0.0)
    assert events == [] and new.tasks == st.tasks and new.free == st.free


def _fifo_ok(staged, launched):
    return all(s in launched for s in staged if any(s < l for l in launched))


def test_tick_fifo_brute_force():
    """Of every subset of staged tasks the node could launch, only the tick's choice is FIFO."""
    rng = random.Random(5)
    for _ in range(200):
        n = rng.randint(1, 7)
        room = rng.randint(1, 4)
        staged = sorted(rng.sample(range(n), rng.randint(1, n)))
        order = staged[:]
        rng.shuffle(order)
        st = SchedulerState(make_job(n), cluster(room), {t: "n0" for t in range(n)})
        for tid in order:
            st.mark_staged(tid, 0.0)
        _, events = schedule_tick(st, 0.0)
        chosen = [e.task_id for e in events]
        size = min(room, len(staged))
        fifo = [set(c) for c in itertools.combinations(staged, size) if _fifo_ok(staged, set(c))]
        assert fifo == [set(chosen)]
        assert chosen == sorted(chosen)


# -- completion and reduce ----------------------------------------------------------


def test_reduce_after_last_of_four():
    st = all_ready(4)
    for tid in range(3):
        st, ev = handle_completion(st, tid, TaskState.COMPLETED, 1.0 + tid)
        assert EventKind.REDUCE not in [e.kind for e in ev]
    st, ev = handle_completion(st, 3, TaskState.COMPLETED, 9.0)
    assert [e.kind for e in ev] == [EventKind.COMPLETED, EventKind.REDUCE]
    assert ev[-1].time == 9.0 and st.job_state == "Completed"


def test_one_failure_blocks_reduce():
    st = all_ready(4)
    for tid, outcome in enumerate([TaskState.COMPLETED, TaskState.FAILED, TaskState.COMPLETED, TaskState.COMPLETED]):
        st, ev = handle_completion(st, tid, outcome, 1.0)
    assert EventKind.REDUCE not in [e.kind for e in st.trace]
    assert st.job_state == "Failed"


def test_completion_errors():
    st = all_ready(2)
    with pytest.raises(UnknownTask):
        handle_completion(st, 7, TaskState.COMPLETED, 1.0)
    pending = SchedulerState(make_job(2), cluster(2))
    with pytest.raises(TaskNotRunning):
        handle_completion(pending, 0, TaskState.COMPLETED, 1.0)


def test_completion_frees_slot_for_queued_task():
    st = SchedulerState(make_job(2), cluster(1))
    st.mark_staged(0, 0.0)
    st.tick(0.0)
    st.mark_ready(0, 1.0)
    assert st.task(1).node_assignment is None
    st, _ = handle_completion(st, 0, TaskState.COMPLETED, 2.0)
    assert st.take_assignments() == [(1, "n0")]
    st.mark_staged(1, 2.0)
    st, events = schedule_tick(st, 2.0)
    assert [(e.kind, e.task_id) for e in events] == [(EventKind.LAUNCHED, 1)]


def test_reduce_gating_randomized():
    rng = random.Random(3)
    for _ in range(300):
        n = rng.randint(1, 6)
        st = all_ready(n)
        for tid, outcome, t in random_completions(rng, n, p_fail=rng.choice([0.0, 0.2])):
            st.handle_completion(tid, TaskState(outcome), t)
        reduces = [e for e in st.trace if e.kind is EventKind.REDUCE]
        all_ok = all(t.state is TaskState.COMPLETED for t in st.tasks)
        assert len(reduces) == (1 if all_ok else 0)
        if reduces:
            ends = [e.time for e in st.trace if e.kind is EventKind.COMPLETED]
            assert reduces[0].time >= max(ends)


# -- pool invariants ---------------------------------------------------------------


def test_pool_invariants_random_interleavings():
    rng = random.Random(9)
    for _ in range(300):
        slots = [rng.randint(1, 4) for _ in range(rng.randint(1, 3))]
        n = rng.randint(1, 12)
        st = SchedulerState(make_job(n, slots_per_task=rng.choice([1, 2])), cluster(*slots))
        now = 0.0
        for _ in range(200):
            if st.all_terminal:
                break
            st.take_assignments()
            now += rng.choice([0.0, 1.0])
            by_state = {s: [t.task_id for t in st.tasks if t.state is s] for s in TaskState}
            stageable = [t for t in by_state[TaskState.PENDING] if st.task(t).node_assignment is not None]
            live = [t.task_id for t in st.tasks if not t.state.terminal]
            moves = [("stage", t) for t in stageable] + [("tick", None)]
            moves += [("ready", t) for t in by_state[TaskState.LAUNCHING]]
            moves += [("done", t) for t in by_state[TaskState.READY]]
            moves += [("fail", t) for t in live if rng.random() < 0.1]
            kind, tid = rng.choice(moves)
            if kind == "stage":
                st.mark_staged(tid, now)
            elif kind == "tick":
                st.tick(now)
            elif kind == "ready":
                st.mark_ready(tid, now)
            elif kind == "done":
                st.handle_completion(tid, rng.choice([TaskState.COMPLETED, TaskState.FAILED]), now)
            else:
                st.fail_task(tid, now, "chaos")
            st.check_pool()
        times = [e.time for e in st.trace]
        assert times == sorted(times)


def test_fifo_per_node_in_full_runs():
    rng = random.Random(21)
    for _ in range(200):
        inst = random_instance(rng)
        job, cl = instance_job_and_cluster(inst)
        st, _ = run_to_completion(job, cl, TableAdapter(inst), VirtualClock(), TableStager(inst))
        launches = {}
        for e in st.trace:
            if e.kind is EventKind.LAUNCHED:
                launches.setdefault(e.node_id, []).append(e.task_id)
        for order in launches.values():
            assert order == sorted(order) and len(set(order)) == len(order)
        assert [e.time for e in st.trace] == sorted(e.time for e in st.trace)


# -- oracle ---------------------------------------------------------------------------


def test_oracle_equivalence():
    rng = random.Random(2024)
    for _ in range(400):
        inst = random_instance(rng)
        job, cl = instance_job_and_cluster(inst)
        st, records = run_to_completion(job, cl, TableAdapter(inst), VirtualClock(), TableStager(inst),
                                        ready_timeout=inst.timeout)
        assert trace_tuples(st.trace) == oracle_trace(inst), inst
        assert len(records) == len(inst.plans)
        assert all(r.outcome.terminal for r in records)


# -- full runs ------------------------------------------------------------------------


def test_sixty_four_on_one_node():
    st, records = run_to_completion(make_job(64), cluster(64), SimulatedAdapter(AdapterSpec()), VirtualClock())
    assert len(records) == 64 and all(r.outcome is TaskState.COMPLETED for r in records)
    for r in records:
        assert r.submit_ts <= r.staged_ts <= r.spawn_ts <= r.ready_ts <= r.completed_ts


def test_zero_latency_launch_equals_staging():
    spec = AdapterSpec(latency_median=0.0, latency_dispersion=0.0, serial_increment=0.0)
    cl = uniform_cluster(1, 64, link_bandwidth=1e9, link_latency=0.01)
    _, [r] = run_to_completion(make_job(1), cl, SimulatedAdapter(spec), VirtualClock(), SimulatedStager(cl.central_store))
    assert r.ready_ts - r.submit_ts == r.staged_ts - r.submit_ts == pytest.approx(0.015)


def test_always_failing_adapter():
    st, records = run_to_completion(make_job(6, reduce=True), cluster(4, 4),
                                    SimulatedAdapter(AdapterSpec(failure_rate=1.0)), VirtualClock())
    assert all(r.outcome is TaskState.FAILED for r in records)
    assert st.job_state == "Failed" and not st.reduce_launched


def test_spawn_failures_do_not_abort(tmp_path):
    (tmp_path / "p").mkdir()
    (tmp_path / "p" / "f").write_text("x")
    job = generate_array_job(scan_inputs("count:3"), JobTemplate(("/nonexistent/APP.EXE", "{input}")),
                             build_manifest(tmp_path / "p"))
    st, records = run_to_completion(job, cluster(2), ProcessAdapter(AdapterSpec(AdapterKind.NATIVE)), WallClock(),
                                    FileStager(tmp_path / "scratch"), ready_timeout=5)
    assert all(r.outcome is TaskState.FAILED for r in records)
    assert all("spawn failed" in r.failure_reason for r in records)


def test_staging_failure_fails_only_that_node():
    cl = cluster(2, 2)
    stager = SimulatedStager(cl.central_store, fail_nodes=["n1"])
    st, records = run_to_completion(make_job(2), cl, SimulatedAdapter(AdapterSpec()), VirtualClock(), stager)
    assert [r.outcome for r in records] == [TaskState.COMPLETED, TaskState.FAILED]


def test_invalid_cluster_rejected():
    with pytest.raises(InvalidCluster):
        run_to_completion(make_job(1), cluster(0), SimulatedAdapter(AdapterSpec()), VirtualClock())


def test_event_lines_round_trip():
    st, _ = run_to_completion(make_job(5, reduce=True), cluster(2, 2), SimulatedAdapter(AdapterSpec()), VirtualClock())
    text = format_trace(st.trace)
    back = [SchedulerEvent.from_line(line) for line in text.splitlines()]
    assert [(e.kind, e.task_id, e.node_id) for e in back] == [(e.kind, e.task_id, e.node_id) for e in st.trace]
    assert all(abs(a.time - b.time) < 1e-9 for a, b in zip(back, st.trace))
    assert text.splitlines()[-1].split()[1:] == ["ReduceLaunched", "-", "-"]
