"""Shared data model: cluster topology, array jobs, tasks and their state machine, clocks.

Everything here is an immutable value. Transitions return new objects, so
tasks and cluster descriptions can be handed between workers freely.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Protocol

NS_PER_S = 1_000_000_000

DEFAULT_SLOTS = 64
DEFAULT_SCRATCH_BYTES = 4 * 10**12
DEFAULT_LINK_BANDWIDTH = 1.25e9  # 10 GbE
DEFAULT_LINK_LATENCY = 0.01
DEFAULT_STORE_BANDWIDTH = 10e9


class SwarmlaunchError(Exception):
    """Base class for errors raised by this package."""


class IllegalTransition(SwarmlaunchError):
    """Raised when an event is applied to a task state that does not accept it."""

    def __init__(self, state: TaskState, event: TransitionEvent, task_id: int | None = None):
        self.state = state
        self.event = event
        self.task_id = task_id
        super().__init__(f"task {task_id}: {event.value} is not legal from {state.value}")


class ClockRegression(IllegalTransition):
    """Raised when a transition is stamped earlier than the task's last transition."""

    def __init__(self, state: TaskState, event: TransitionEvent, task_id: int | None, now: float, last: float):
        super().__init__(state, event, task_id)
        self.args = (f"task {task_id}: {event.value} at {now} precedes last transition at {last}",)


class ConfigError(SwarmlaunchError):
    """Raised for malformed configuration files or unknown presets."""


# ---------------------------------------------------------------------------
# Time
# ---------------------------------------------------------------------------


def to_ns(seconds: float) -> int:
    return round(seconds * NS_PER_S)


class Clock(Protocol):
    virtual: bool

    def now(self) -> float: ...


class VirtualClock:
    """Simulated time, advanced explicitly by the event loop. Stored as integer nanoseconds."""

    virtual = True

    def __init__(self, start: float = 0.0):
        self._ns = to_ns(start)

    def now(self) -> float:
        return self._ns / NS_PER_S

    def advance_to(self, t: float) -> float:
        ns = to_ns(t)
        if ns < self._ns:
            raise ValueError(f"virtual clock cannot go backwards ({t} < {self.now()})")
        self._ns = ns
        return self.now()


class WallClock:
    """Monotonic wall time in seconds since the clock was created."""

    virtual = False

    def __init__(self) -> None:
        self._origin = time.perf_counter_ns()

    def now(self) -> float:
        return (time.perf_counter_ns() - self._origin) / NS_PER_S


# ---------------------------------------------------------------------------
# Cluster topology
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    slots: int = DEFAULT_SLOTS
    local_scratch_bytes: int = DEFAULT_SCRATCH_BYTES
    link_bandwidth: float = DEFAULT_LINK_BANDWIDTH
    link_latency: float = DEFAULT_LINK_LATENCY


@dataclass(frozen=True)
class StoreSpec:
    aggregate_bandwidth: float = DEFAULT_STORE_BANDWIDTH
    path: str = ""


@dataclass(frozen=True)
class ClusterSpec:
    nodes: tuple[NodeSpec, ...]
    central_store: StoreSpec = field(default_factory=StoreSpec)

    @property
    def total_slots(self) -> int:
        return sum(n.slots for n in self.nodes)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def prefix(self, count: int) -> ClusterSpec:
        """The cluster restricted to its first ``count`` nodes."""
        return replace(self, nodes=self.nodes[:count])


@dataclass(frozen=True)
class Violation:
    kind: str
    node_id: str | None = None

    def __str__(self) -> str:
        return self.kind if self.node_id is None else f"{self.kind}({self.node_id})"


def EmptyCluster() -> Violation:
    return Violation("EmptyCluster")


def ZeroSlots(node_id: str) -> Violation:
    return Violation("ZeroSlots", node_id)


def DuplicateNodeId(node_id: str) -> Violation:
    return Violation("DuplicateNodeId", node_id)


def NonPositiveBandwidth(node_id: str) -> Violation:
    return Violation("NonPositiveBandwidth", node_id)


def NegativeLatency(node_id: str) -> Violation:
    return Violation("NegativeLatency", node_id)


def NegativeScratch(node_id: str) -> Violation:
    return Violation("NegativeScratch", node_id)


def NonPositiveStoreBandwidth() -> Violation:
    return Violation("NonPositiveStoreBandwidth")


def validate_cluster(spec: ClusterSpec) -> list[Violation]:
    """Return every invariant violation in ``spec``; an empty list means valid."""
    violations: list[Violation] = []
    if not spec.nodes:
        violations.append(EmptyCluster())
    seen: set[str] = set()
    for n in spec.nodes:
        if n.node_id in seen:
            violations.append(DuplicateNodeId(n.node_id))
        seen.add(n.node_id)
        if n.slots < 1:
            violations.append(ZeroSlots(n.node_id))
        if not n.link_bandwidth > 0:
            violations.append(NonPositiveBandwidth(n.node_id))
        if not n.link_latency >= 0:
            violations.append(NegativeLatency(n.node_id))
        if n.local_scratch_bytes < 0:
            violations.append(NegativeScratch(n.node_id))
    if not spec.central_store.aggregate_bandwidth > 0:
        violations.append(NonPositiveStoreBandwidth())
    return violations


def uniform_cluster(node_count: int, slots: int = DEFAULT_SLOTS, prefix: str = "node", **node_kw: Any) -> ClusterSpec:
    width = max(3, len(str(node_count - 1)))
    store = node_kw.pop("central_store", StoreSpec())
    nodes = tuple(NodeSpec(f"{prefix}{i:0{width}d}", slots=slots, **node_kw) for i in range(node_count))
    return ClusterSpec(nodes=nodes, central_store=store)


PRESETS = {
    "txgreen-like": lambda: uniform_cluster(256, 64),
    "desk": lambda: uniform_cluster(8, 8),
}


def _node_from_dict(d: dict[str, Any]) -> NodeSpec:
    known = {"node_id", "slots", "local_scratch_bytes", "link_bandwidth", "link_latency"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown node fields: {sorted(unknown)}")
    if "node_id" not in d:
        raise ConfigError("node entry is missing 'node_id'")
    return NodeSpec(**d)


def cluster_from_dict(data: dict[str, Any]) -> ClusterSpec:
    """Build a ClusterSpec from its JSON form.

    Accepted shape::

        {"central_store": {"aggregate_bandwidth": 1e10, "path": "/central"},
         "nodes": [{"node_id": "n0", "slots": 64, ...}, ...]}

    or, instead of ``nodes``, a uniform block::

        {"node_count": 256, "node_template": {"slots": 64, ...}, "node_prefix": "node"}
    """
    if not isinstance(data, dict):
        raise ConfigError("cluster config must be a JSON object")
    store_d = data.get("central_store", {})
    try:
        store = StoreSpec(**store_d)
    except TypeError as e:
        raise ConfigError(f"bad central_store: {e}") from None
    if "nodes" in data:
        try:
            nodes = tuple(_node_from_dict(dict(n)) for n in data["nodes"])
        except TypeError as e:
            raise ConfigError(f"bad node entry: {e}") from None
        return ClusterSpec(nodes=nodes, central_store=store)
    if "node_count" in data:
        template = dict(data.get("node_template", {}))
        template.pop("node_id", None)
        try:
            cluster = uniform_cluster(int(data["node_count"]), prefix=data.get("node_prefix", "node"), **template)
        except TypeError as e:
            raise ConfigError(f"bad node_template: {e}") from None
        return replace(cluster, central_store=store)
    raise ConfigError("cluster config needs 'nodes' or 'node_count'")


def cluster_to_dict(spec: ClusterSpec) -> dict[str, Any]:
    return {
        "central_store": {"aggregate_bandwidth": spec.central_store.aggregate_bandwidth, "path": spec.central_store.path},
        "nodes": [
            {
                "node_id": n.node_id,
                "slots": n.slots,
                "local_scratch_bytes": n.local_scratch_bytes,
                "link_bandwidth": n.link_bandwidth,
                "link_latency": n.link_latency,
            }
            for n in spec.nodes
        ],
    }


def load_cluster(ref: str | Path) -> ClusterSpec:
    """Resolve a preset name or load a JSON cluster file."""
    if isinstance(ref, str) and ref in PRESETS:
        return PRESETS[ref]()
    path = Path(ref)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such cluster preset or file: {ref}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read cluster file {ref}: {e}") from None
    return cluster_from_dict(data)


# ---------------------------------------------------------------------------
# Tasks and jobs
# ---------------------------------------------------------------------------


class TaskState(str, Enum):
    PENDING = "Pending"
    STAGED = "Staged"
    LAUNCHING = "Launching"
    READY = "Ready"
    COMPLETED = "Completed"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (TaskState.COMPLETED, TaskState.FAILED)


class TransitionEvent(str, Enum):
    STAGED = "StagedEvent"
    LAUNCH = "LaunchEvent"
    READY = "ReadyEvent"
    COMPLETE = "CompleteEvent"
    FAIL = "FailEvent"


TRANSITIONS: dict[tuple[TaskState, TransitionEvent], TaskState] = {
    (TaskState.PENDING, TransitionEvent.STAGED): TaskState.STAGED,
    (TaskState.STAGED, TransitionEvent.LAUNCH): TaskState.LAUNCHING,
    (TaskState.LAUNCHING, TransitionEvent.READY): TaskState.READY,
    (TaskState.READY, TransitionEvent.COMPLETE): TaskState.COMPLETED,
}
for _s in (TaskState.PENDING, TaskState.STAGED, TaskState.LAUNCHING, TaskState.READY):
    TRANSITIONS[(_s, TransitionEvent.FAIL)] = TaskState.FAILED
del _s


@dataclass(frozen=True)
class Task:
    task_id: int
    input_ref: str
    command: tuple[str, ...] = ()
    node_assignment: str | None = None
    state: TaskState = TaskState.PENDING
    # (state entered, clock reading), starting with the Pending entry at submit time
    timestamps: tuple[tuple[TaskState, float], ...] = ()
    failure_reason: str | None = None

    def timestamp(self, state: TaskState) -> float | None:
        for s, t in self.timestamps:
            if s is state:
                return t
        return None

    @property
    def last_timestamp(self) -> float | None:
        return self.timestamps[-1][1] if self.timestamps else None

    def event_log(self) -> list[tuple[TransitionEvent, float]]:
        """The (event, time) sequence that produced this task from its Pending form."""
        return [(_EVENT_INTO[s], t) for s, t in self.timestamps[1:]]


_EVENT_INTO = {
    TaskState.STAGED: TransitionEvent.STAGED,
    TaskState.LAUNCHING: TransitionEvent.LAUNCH,
    TaskState.READY: TransitionEvent.READY,
    TaskState.COMPLETED: TransitionEvent.COMPLETE,
    TaskState.FAILED: TransitionEvent.FAIL,
}


def advance_task(task: Task, event: TransitionEvent, now: float, reason: str | None = None) -> Task:
    """Apply ``event`` at time ``now`` and return the updated task.

    Raises IllegalTransition for any (state, event) pair outside TRANSITIONS and
    ClockRegression if ``now`` precedes the task's previous transition.
    """
    target = TRANSITIONS.get((task.state, event))
    if target is None:
        raise IllegalTransition(task.state, event, task.task_id)
    last = task.last_timestamp
    if last is not None and now < last:
        raise ClockRegression(task.state, event, task.task_id, now, last)
    return replace(
        task,
        state=target,
        timestamps=task.timestamps + ((target, now),),
        failure_reason=reason if target is TaskState.FAILED else task.failure_reason,
    )


def replay(initial: Task, log: list[tuple[TransitionEvent, float]], reason: str | None = None) -> Task:
    task = initial
    for event, t in log:
        task = advance_task(task, event, t, reason if event is TransitionEvent.FAIL else None)
    return task


@dataclass(frozen=True)
class ReduceSpec:
    command: tuple[str, ...]


@dataclass(frozen=True)
class ArrayJob:
    job_id: str
    tasks: tuple[Task, ...]
    payload: Any  # staging.PayloadManifest
    reduce: ReduceSpec | None = None
    submit_time: float = 0.0
    slots_per_task: int = 1

    def __post_init__(self) -> None:
        if not self.tasks:
            raise ValueError("an array job needs at least one task")
        if self.slots_per_task < 1:
            raise ValueError("slots_per_task must be >= 1")
        for i, t in enumerate(self.tasks):
            if t.task_id != i:
                raise ValueError(f"task ids must be contiguous from 0 (position {i} has id {t.task_id})")


@dataclass(frozen=True)
class LaunchRecord:
    task_id: int
    node_id: str | None
    submit_ts: float
    staged_ts: float | None
    spawn_ts: float | None
    ready_ts: float | None
    completed_ts: float | None
    outcome: TaskState
    failure_reason: str | None = None

    @classmethod
    def from_task(cls, task: Task) -> LaunchRecord:
        end = task.timestamp(TaskState.COMPLETED)
        if end is None:
            end = task.timestamp(TaskState.FAILED)
        return cls(
            task_id=task.task_id,
            node_id=task.node_assignment,
            submit_ts=task.timestamp(TaskState.PENDING),
            staged_ts=task.timestamp(TaskState.STAGED),
            spawn_ts=task.timestamp(TaskState.LAUNCHING),
            ready_ts=task.timestamp(TaskState.READY),
            completed_ts=end,
            outcome=task.state,
            failure_reason=task.failure_reason,
        )
