"""Array-job scheduler: slot accounting, placement, FIFO launch, epilog and reduce gating.

``SchedulerState`` is a single-writer state machine. The pure entry points
``schedule_tick`` and ``handle_completion`` copy it and return the new state
with the emitted events; ``run_to_completion`` drives one state in place.

Driver rules (shared by the virtual and wall-clock backends):

1. At submit every task is Pending. ``pack_tasks`` places as many as fit,
   round-robin over nodes; the rest queue unassigned.
2. Every node holding a task pulls the payload; when its pull finishes, each
   of its tasks becomes Staged.
3. Occurrences (staged, ready, exit) are handled in time order; ties break on
   that class order, then task id. After all occurrences at an instant,
   ticks run at that instant until one emits nothing.
4. A tick launches, per node, the lowest-id Staged tasks that fit in its free
   slots, and emits them in ascending task id.
5. Whenever slots are released, queued tasks (lowest id first) are assigned to
   the first usable node with room, and staged there from its cache.
6. When every task is terminal and none failed, a job with a reduce step emits
   exactly one ReduceLaunched at the instant of the last completion.
"""

from __future__ import annotations

import heapq
import logging
import os
import queue
import tempfile
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

from .adapters import ReadyTimeout, SpawnFailed
from .core import (
    ArrayJob,
    Clock,
    ClusterSpec,
    LaunchRecord,
    SwarmlaunchError,
    Task,
    TaskState,
    TransitionEvent,
    advance_task,
    to_ns,
    validate_cluster,
    NS_PER_S,
)
from .staging import FileStager, SimulatedStager, StagingError

log = logging.getLogger(__name__)


class SchedulerError(SwarmlaunchError):
    pass


class UnknownTask(SchedulerError):
    pass


class TaskNotRunning(SchedulerError):
    pass


class InvalidCluster(SchedulerError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid cluster: " + ", ".join(str(v) for v in self.violations))


class EventKind(str, Enum):
    STAGED = "TaskStaged"
    LAUNCHED = "TaskLaunched"
    READY = "TaskReady"
    COMPLETED = "TaskCompleted"
    FAILED = "TaskFailed"
    REDUCE = "ReduceLaunched"


@dataclass(frozen=True)
class SchedulerEvent:
    time: float
    kind: EventKind
    task_id: int | None = None
    node_id: str | None = None

    def to_line(self) -> str:
        tid = "-" if self.task_id is None else str(self.task_id)
        return f"{self.time:.9f} {self.kind.value} {tid} {self.node_id or '-'}"

    @classmethod
    def from_line(cls, line: str) -> SchedulerEvent:
        t, kind, tid, nid = line.split()
        return cls(float(t), EventKind(kind), None if tid == "-" else int(tid), None if nid == "-" else nid)


@dataclass(frozen=True)
class Allocation:
    task_id: int
    node_id: str
    slots: int


def pack_tasks(job: ArrayJob, cluster: ClusterSpec) -> dict[int, str]:
    """Round-robin placement in node order; tasks that do not fit stay unassigned."""
    demand = job.slots_per_task
    nodes = [n.node_id for n in cluster.nodes]
    room = [n.slots for n in cluster.nodes]
    assignment: dict[int, str] = {}
    cursor = 0
    for task in job.tasks:
        for step in range(len(nodes)):
            i = (cursor + step) % len(nodes)
            if room[i] >= demand:
                break
        else:
            break
        room[i] -= demand
        assignment[task.task_id] = nodes[i]
        cursor = i + 1
    return assignment


class SchedulerState:
    def __init__(self, job: ArrayJob, cluster: ClusterSpec, assignment: dict[int, str] | None = None):
        self.job_id = job.job_id
        self.reduce = job.reduce
        self.demand = job.slots_per_task
        self.node_order = [n.node_id for n in cluster.nodes]
        self.capacity = {n.node_id: n.slots for n in cluster.nodes}
        self.free = dict(self.capacity)
        # slots promised to assigned tasks that do not hold an allocation yet
        self.reserved = {n: 0 for n in self.node_order}
        self.allocations: dict[int, Allocation] = {}
        self.tasks: list[Task] = list(job.tasks)
        self.waiting: dict[str, list[int]] = {n: [] for n in self.node_order}
        self.queued: deque[int] = deque()
        self.unusable: set[str] = set()
        self.new_assignments: list[tuple[int, str]] = []
        self.n_terminal = sum(1 for t in self.tasks if t.state.terminal)
        self.n_failed = sum(1 for t in self.tasks if t.state is TaskState.FAILED)
        self.reduce_launched = False
        self.reduce_exit_code: int | None = None
        self.trace: list[SchedulerEvent] = []
        self.last_time = job.submit_time

        if assignment is None:
            assignment = pack_tasks(job, cluster)
        for t in self.tasks:
            if t.task_id in assignment:
                self._assign(t.task_id, assignment[t.task_id], record=False)
            else:
                self.queued.append(t.task_id)

    def copy(self) -> SchedulerState:
        new = object.__new__(SchedulerState)
        new.__dict__.update(self.__dict__)
        new.free = dict(self.free)
        new.reserved = dict(self.reserved)
        new.allocations = dict(self.allocations)
        new.tasks = list(self.tasks)
        new.waiting = {n: list(h) for n, h in self.waiting.items()}
        new.queued = deque(self.queued)
        new.unusable = set(self.unusable)
        new.new_assignments = list(self.new_assignments)
        new.trace = list(self.trace)
        return new

    # -- queries ----------------------------------------------------------

    def task(self, task_id: int) -> Task:
        if not 0 <= task_id < len(self.tasks):
            raise UnknownTask(f"no task {task_id} in job {self.job_id}")
        return self.tasks[task_id]

    @property
    def all_terminal(self) -> bool:
        return self.n_terminal == len(self.tasks)

    @property
    def job_state(self) -> str:
        if not self.all_terminal:
            return "Running"
        return "Failed" if self.n_failed else "Completed"

    def allocated(self, node_id: str) -> int:
        return self.capacity[node_id] - self.free[node_id]

    def tasks_on(self, node_id: str, state: TaskState | None = None) -> list[int]:
        return [
            t.task_id for t in self.tasks if t.node_assignment == node_id and (state is None or t.state is state)
        ]

    def records(self) -> list[LaunchRecord]:
        return [LaunchRecord.from_task(t) for t in self.tasks]

    def take_assignments(self) -> list[tuple[int, str]]:
        out, self.new_assignments = self.new_assignments, []
        return out

    # -- internals --------------------------------------------------------

    def _emit(self, now: float, kind: EventKind, task_id: int | None, node_id: str | None) -> SchedulerEvent:
        if now < self.last_time:
            raise SchedulerError(f"event at {now} precedes previous event at {self.last_time}")
        self.last_time = now
        ev = SchedulerEvent(now, kind, task_id, node_id)
        self.trace.append(ev)
        return ev

    def _assign(self, task_id: int, node_id: str, record: bool = True) -> None:
        self.tasks[task_id] = replace(self.tasks[task_id], node_assignment=node_id)
        self.reserved[node_id] += self.demand
        if record:
            self.new_assignments.append((task_id, node_id))

    def _refill(self) -> None:
        while self.queued:
            for n in self.node_order:
                if n not in self.unusable and self.free[n] - self.reserved[n] >= self.demand:
                    self._assign(self.queued.popleft(), n)
                    break
            else:
                return

    def _terminal(self, now: float, failed: bool) -> list[SchedulerEvent]:
        self.n_terminal += 1
        self.n_failed += failed
        self._refill()
        if self.all_terminal and not self.n_failed and self.reduce is not None and not self.reduce_launched:
            self.reduce_launched = True
            return [self._emit(now, EventKind.REDUCE, None, None)]
        return []

    # -- transitions --------------------------------------------------------

    def mark_staged(self, task_id: int, now: float) -> list[SchedulerEvent]:
        task = self.task(task_id)
        if task.node_assignment is None:
            raise SchedulerError(f"task {task_id} is not assigned to a node")
        self.tasks[task_id] = advance_task(task, TransitionEvent.STAGED, now)
        heapq.heappush(self.waiting[task.node_assignment], task_id)
        return [self._emit(now, EventKind.STAGED, task_id, task.node_assignment)]

    def tick(self, now: float) -> list[SchedulerEvent]:
        chosen: list[int] = []
        for n in self.node_order:
            heap = self.waiting[n]
            room = self.free[n] // self.demand
            while heap and room > 0:
                tid = heapq.heappop(heap)
                if self.tasks[tid].state is TaskState.STAGED:
                    chosen.append(tid)
                    room -= 1
        chosen.sort()
        events = []
        for tid in chosen:
            task = self.tasks[tid]
            node = task.node_assignment
            self.tasks[tid] = advance_task(task, TransitionEvent.LAUNCH, now)
            self.free[node] -= self.demand
            self.reserved[node] -= self.demand
            self.allocations[tid] = Allocation(tid, node, self.demand)
            events.append(self._emit(now, EventKind.LAUNCHED, tid, node))
        return events

    def mark_ready(self, task_id: int, now: float) -> list[SchedulerEvent]:
        task = self.task(task_id)
        self.tasks[task_id] = advance_task(task, TransitionEvent.READY, now)
        return [self._emit(now, EventKind.READY, task_id, task.node_assignment)]

    def _release(self, task_id: int) -> None:
        alloc = self.allocations.pop(task_id, None)
        if alloc is not None:
            self.free[alloc.node_id] += alloc.slots
        else:
            node = self.tasks[task_id].node_assignment
            if node is not None:
                self.reserved[node] -= self.demand

    def handle_completion(self, task_id: int, outcome: TaskState, now: float) -> list[SchedulerEvent]:
        task = self.task(task_id)
        if task.state is not TaskState.READY:
            raise TaskNotRunning(f"task {task_id} is {task.state.value}, not Ready")
        if outcome is TaskState.COMPLETED:
            self.tasks[task_id] = advance_task(task, TransitionEvent.COMPLETE, now)
            kind = EventKind.COMPLETED
        elif outcome is TaskState.FAILED:
            self.tasks[task_id] = advance_task(task, TransitionEvent.FAIL, now, "nonzero exit")
            kind = EventKind.FAILED
        else:
            raise ValueError(f"outcome must be Completed or Failed, not {outcome}")
        self._release(task_id)
        events = [self._emit(now, kind, task_id, task.node_assignment)]
        return events + self._terminal(now, kind is EventKind.FAILED)

    def fail_task(self, task_id: int, now: float, reason: str) -> list[SchedulerEvent]:
        """Fail a task from any non-terminal state, returning whatever it held."""
        task = self.task(task_id)
        self.tasks[task_id] = advance_task(task, TransitionEvent.FAIL, now, reason)
        if task.node_assignment is None:
            self.queued.remove(task_id)
        else:
            self._release(task_id)
        events = [self._emit(now, EventKind.FAILED, task_id, task.node_assignment)]
        return events + self._terminal(now, True)

    def mark_node_unusable(self, node_id: str) -> None:
        self.unusable.add(node_id)

    def check_pool(self) -> None:
        """Assert slot conservation and the no-oversubscription rule."""
        for n in self.node_order:
            held = sum(a.slots for a in self.allocations.values() if a.node_id == n)
            assert held + self.free[n] == self.capacity[n], n
            assert 0 <= self.free[n] <= self.capacity[n], n
            active = sum(
                1 for t in self.tasks if t.node_assignment == n and t.state in (TaskState.LAUNCHING, TaskState.READY)
            )
            assert active * self.demand <= self.capacity[n], n


def schedule_tick(state: SchedulerState, now: float) -> tuple[SchedulerState, list[SchedulerEvent]]:
    new = state.copy()
    return new, new.tick(now)


def handle_completion(
    state: SchedulerState, task_id: int, outcome: TaskState, now: float
) -> tuple[SchedulerState, list[SchedulerEvent]]:
    new = state.copy()
    return new, new.handle_completion(task_id, outcome, now)


def format_trace(events: Iterable[SchedulerEvent]) -> str:
    return "".join(e.to_line() + "\n" for e in events)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

_STAGE, _READY, _EXIT = 0, 1, 2


@dataclass(order=True)
class _Occurrence:
    time: float
    klass: int
    task_id: int
    seq: int
    payload: Any = field(compare=False, default=None)


class _VirtualChannel:
    def __init__(self, clock):
        self.clock = clock
        self._heap: list[_Occurrence] = []
        self._seq = 0

    def post(self, time: float, klass: int, task_id: int, payload: Any = None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, _Occurrence(to_ns(time) / NS_PER_S, klass, task_id, self._seq, payload))

    @property
    def outstanding(self) -> bool:
        return bool(self._heap)

    def next_batch(self) -> list[_Occurrence]:
        t = self._heap[0].time
        batch = []
        while self._heap and self._heap[0].time == t:
            batch.append(heapq.heappop(self._heap))
        self.clock.advance_to(t)
        return batch


class _ThreadChannel:
    """Occurrences reported by worker threads, serialized through a queue."""

    def __init__(self, clock):
        self.clock = clock
        self._q: queue.Queue[_Occurrence] = queue.Queue()
        self._seq = 0
        self._lock = threading.Lock()
        self.active = 0

    def post(self, time: float, klass: int, task_id: int, payload: Any = None) -> None:
        with self._lock:
            self._seq += 1
            seq = self._seq
        self._q.put(_Occurrence(time, klass, task_id, seq, payload))

    def worker_started(self) -> None:
        with self._lock:
            self.active += 1

    def worker_done(self) -> None:
        with self._lock:
            self.active -= 1

    @property
    def outstanding(self) -> bool:
        return self.active > 0 or not self._q.empty()

    def next_batch(self) -> list[_Occurrence]:
        batch = []
        while not batch:
            try:
                batch.append(self._q.get(timeout=0.5))
            except queue.Empty:
                if not self.outstanding:
                    return []
        while True:
            try:
                batch.append(self._q.get_nowait())
            except queue.Empty:
                break
        batch.sort()
        return batch


def default_scratch_root() -> str:
    return os.environ.get("SWARMLAUNCH_SCRATCH") or os.path.join(tempfile.gettempdir(), "swarmlaunch-scratch")


class _Driver:
    def __init__(self, job, cluster, adapter, clock, stager, ready_timeout):
        self.job = job
        self.cluster = cluster
        self.nodes = {n.node_id: n for n in cluster.nodes}
        self.adapter = adapter
        self.clock = clock
        self.stager = stager
        self.ready_timeout = ready_timeout
        self.state = SchedulerState(job, cluster)
        self.channel = _VirtualChannel(clock) if clock.virtual else _ThreadChannel(clock)
        self.locations: dict[str, str | None] = {}
        self.stage_results = []

    def _at(self, t: float) -> float:
        # wall-clock reports can arrive after later events were emitted
        return t if self.clock.virtual else max(t, self.state.last_time)

    def _after_events(self, events: list[SchedulerEvent]) -> None:
        for ev in events:
            if ev.kind is EventKind.REDUCE:
                self.state.reduce_exit_code = self.adapter.run_reduce(self.job.reduce, self.clock)
        for tid, node_id in self.state.take_assignments():
            try:
                r = self.stager.stage_to_node(self.job.payload, self.nodes[node_id], self.clock)
            except StagingError as e:
                self.channel.post(self.clock.now(), _STAGE, tid, str(e))
            else:
                self.locations.setdefault(node_id, r.location)
                self.channel.post(r.finished, _STAGE, tid, None)

    def _stage_initial(self) -> None:
        by_node: dict[str, list[int]] = {}
        for t in self.state.tasks:
            if t.node_assignment is not None and t.state is TaskState.PENDING:
                by_node.setdefault(t.node_assignment, []).append(t.task_id)
        used = [n for n in self.cluster.nodes if n.node_id in by_node]
        results, _ = self.stager.stage_all(self.job.payload, used, self.clock)
        self.stage_results = results
        for r in results:
            if r.ok:
                self.locations[r.node_id] = r.location
            else:
                self.state.mark_node_unusable(r.node_id)
            for tid in by_node[r.node_id]:
                self.channel.post(r.finished, _STAGE, tid, r.error)

    def _launch(self, tid: int, now: float) -> None:
        task = self.state.tasks[tid]
        node = task.node_assignment
        try:
            handle = self.adapter.launch(task, node, self.locations.get(node), self.clock)
        except SpawnFailed as e:
            self._after_events(self.state.fail_task(tid, now, str(e)))
            return
        if self.clock.virtual:
            try:
                ready = self.adapter.await_ready(handle, self.ready_timeout, self.clock)
            except ReadyTimeout as e:
                self.channel.post(e.at, _READY, tid, str(e))
                return
            self.channel.post(ready, _READY, tid, None)
            outcome, end = self.adapter.wait_exit(handle, self.clock)
            self.channel.post(end, _EXIT, tid, outcome)
        else:
            self.channel.worker_started()
            threading.Thread(target=self._watch, args=(handle,), daemon=True).start()

    def _watch(self, handle) -> None:
        tid = handle.task_id
        try:
            try:
                ready = self.adapter.await_ready(handle, self.ready_timeout, self.clock)
            except ReadyTimeout as e:
                self.adapter.kill(handle)
                self.channel.post(e.at, _READY, tid, str(e))
                return
            self.channel.post(ready, _READY, tid, None)
            outcome, end = self.adapter.wait_exit(handle, self.clock)
            self.channel.post(end, _EXIT, tid, outcome)
        except Exception as e:  # a watcher must always report back
            log.exception("watcher for task %d crashed", tid)
            self.channel.post(self.clock.now(), _READY, tid, f"watcher error: {e}")
        finally:
            self.channel.worker_done()

    def _apply(self, occ: _Occurrence) -> None:
        t = self._at(occ.time)
        st = self.state
        if occ.klass == _STAGE:
            events = st.mark_staged(occ.task_id, t) if occ.payload is None else st.fail_task(occ.task_id, t, occ.payload)
        elif occ.klass == _READY:
            if occ.payload is None:
                events = st.mark_ready(occ.task_id, t)
            elif st.tasks[occ.task_id].state.terminal:
                events = []
            else:
                events = st.fail_task(occ.task_id, t, occ.payload)
        else:
            if st.tasks[occ.task_id].state is not TaskState.READY:
                return
            events = st.handle_completion(occ.task_id, occ.payload, t)
        self._after_events(events)

    def _settle(self, now: float) -> None:
        while True:
            if not self.clock.virtual:
                now = max(self.clock.now(), self.state.last_time)
            events = self.state.tick(now)
            if not events:
                return
            for ev in events:
                self._launch(ev.task_id, now)

    def execute(self) -> tuple[SchedulerState, list[LaunchRecord]]:
        self._stage_initial()
        self._settle(self.clock.now() if self.clock.virtual else self.state.last_time)
        while not self.state.all_terminal:
            if not self.channel.outstanding:
                t = self._at(self.clock.now())
                for tid in range(len(self.state.tasks)):
                    if not self.state.tasks[tid].state.terminal:
                        self._after_events(self.state.fail_task(tid, t, "no usable node"))
                break
            batch = self.channel.next_batch()
            if not batch:
                continue
            for occ in batch:
                self._apply(occ)
            self._settle(batch[-1].time if self.clock.virtual else self.clock.now())
        return self.state, self.state.records()


def run_to_completion(
    job: ArrayJob,
    cluster: ClusterSpec,
    adapter,
    clock: Clock,
    stager=None,
    *,
    ready_timeout: float | None = None,
) -> tuple[SchedulerState, list[LaunchRecord]]:
    """Stage, launch and reap every task of ``job``; return the final state and one record per task.

    Staging, spawn and readiness problems become task failures; they never
    abort the run.
    """
    violations = validate_cluster(cluster)
    if violations:
        raise InvalidCluster(violations)
    if getattr(adapter, "virtual", clock.virtual) != clock.virtual:
        raise SchedulerError("adapter and clock disagree on virtual vs wall time")
    if stager is None:
        stager = SimulatedStager(cluster.central_store) if clock.virtual else FileStager(default_scratch_root())
    return _Driver(job, cluster, adapter, clock, stager, ready_timeout).execute()
