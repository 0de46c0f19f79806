"""Launch backends with a common launch / await_ready / wait_exit contract.

``SimulatedAdapter`` computes readiness and exit instants in virtual time.
``ProcessAdapter`` spawns real children, either as-is (NativeProcess) or behind
a command prefix such as a compatibility-layer loader (PrefixCommand). A
process counts as launched when it prints ``SWARMLAUNCH_READY <task_id>`` on
stdout.
"""

from __future__ import annotations

import math
import os
import random
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .core import Clock, ReduceSpec, SwarmlaunchError, Task, TaskState

SENTINEL = "SWARMLAUNCH_READY"


class AdapterKind(str, Enum):
    SIMULATED = "sim"
    NATIVE = "proc"
    PREFIX = "prefix"


class AdapterConfigError(SwarmlaunchError):
    pass


class SpawnFailed(SwarmlaunchError):
    def __init__(self, task_id: int, reason: str):
        self.task_id = task_id
        self.reason = reason
        super().__init__(f"task {task_id}: spawn failed: {reason}")


class ReadyTimeout(SwarmlaunchError):
    """The instance never signalled readiness.

    ``exited`` tells a child that ran to exit without the sentinel apart from
    one that was still running at the deadline. ``at`` is the clock reading at
    which the failure was established.
    """

    def __init__(self, task_id: int, at: float, exited: bool):
        self.task_id = task_id
        self.at = at
        self.exited = exited
        why = "exited without readiness sentinel" if exited else "no readiness sentinel before timeout"
        super().__init__(f"task {task_id}: {why}")


@dataclass(frozen=True)
class AdapterSpec:
    kind: AdapterKind = AdapterKind.SIMULATED
    # simulated backend
    latency_median: float = 2.0
    latency_dispersion: float = 0.25
    serial_increment: float = 0.15
    run_duration: float = 1.0
    failure_rate: float = 0.0
    # process backends
    prefix: tuple[str, ...] = ()
    setup_command: tuple[str, ...] = ()
    env: tuple[tuple[str, str], ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AdapterKind(self.kind))
        object.__setattr__(self, "prefix", tuple(self.prefix))
        object.__setattr__(self, "setup_command", tuple(self.setup_command))
        if self.kind is AdapterKind.SIMULATED:
            for name in ("latency_median", "latency_dispersion", "serial_increment", "run_duration"):
                if not getattr(self, name) >= 0:
                    raise AdapterConfigError(f"{name} must be nonnegative")
            if not 0.0 <= self.failure_rate <= 1.0:
                raise AdapterConfigError("failure_rate must be in [0, 1]")
        if self.kind is AdapterKind.PREFIX and not self.prefix:
            raise AdapterConfigError("a prefix adapter needs a nonempty prefix")

    @property
    def label(self) -> str:
        if self.kind is AdapterKind.PREFIX:
            return "prefix:" + shlex.join(self.prefix)
        return self.kind.value

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is AdapterKind.SIMULATED:
            d.update(
                latency_median=self.latency_median,
                latency_dispersion=self.latency_dispersion,
                serial_increment=self.serial_increment,
                run_duration=self.run_duration,
                failure_rate=self.failure_rate,
            )
        else:
            d.update(prefix=list(self.prefix), setup_command=list(self.setup_command))
        return d


def parse_adapter(text: str, **params: Any) -> AdapterSpec:
    """``sim`` | ``proc`` | ``prefix:CMD`` (CMD is split shell-style)."""
    if text == "sim":
        return AdapterSpec(AdapterKind.SIMULATED, **params)
    if text == "proc":
        return AdapterSpec(AdapterKind.NATIVE, **params)
    if text.startswith("prefix:"):
        return AdapterSpec(AdapterKind.PREFIX, prefix=tuple(shlex.split(text[len("prefix:"):])), **params)
    raise AdapterConfigError(f"unknown adapter {text!r} (expected sim, proc or prefix:CMD)")


@dataclass
class InstanceHandle:
    task_id: int
    node_id: str
    spawn_time: float
    backend: Any = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Simulated
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _SimInstance:
    ready_at: float
    exit_at: float
    outcome: TaskState


class SimulatedAdapter:
    """Virtual-time launches.

    Per-instance latency is lognormal around ``latency_median`` (dispersion is
    the log-space standard deviation; 0 gives a fixed latency). Launches on one
    node also pass through a serial startup section: an instance that finds k
    others still launching on its node spends ``serial_increment * k`` there
    before its own latency starts.

    Random draws depend only on (seed, task_id), so a task gets the same sample
    whatever else is running alongside it.
    """

    virtual = True

    def __init__(self, spec: AdapterSpec, seed: int = 0):
        if spec.kind is not AdapterKind.SIMULATED:
            raise AdapterConfigError("SimulatedAdapter needs a simulated AdapterSpec")
        self.spec = spec
        self.seed = seed
        self._section_free: dict[str, float] = {}
        self._launching: dict[str, list[float]] = {}

    def _draw(self, task_id: int) -> tuple[float, bool]:
        rng = random.Random(f"{self.seed}/{task_id}")
        z = rng.gauss(0.0, 1.0)
        fail = rng.random() < self.spec.failure_rate
        latency = self.spec.latency_median * math.exp(self.spec.latency_dispersion * z)
        return latency, fail

    def launch(self, task: Task, node_id: str, workdir: str | None, clock: Clock) -> InstanceHandle:
        now = clock.now()
        latency, fail = self._draw(task.task_id)
        in_flight = [t for t in self._launching.get(node_id, []) if t > now]
        start = max(now, self._section_free.get(node_id, now))
        section_end = start + self.spec.serial_increment * len(in_flight)
        self._section_free[node_id] = section_end
        ready_at = section_end + latency
        in_flight.append(ready_at)
        self._launching[node_id] = in_flight
        inst = _SimInstance(ready_at, ready_at + self.spec.run_duration, TaskState.FAILED if fail else TaskState.COMPLETED)
        return InstanceHandle(task.task_id, node_id, now, inst)

    def await_ready(self, handle: InstanceHandle, timeout: float | None, clock: Clock) -> float:
        ready = handle.backend.ready_at
        if timeout is not None and ready - handle.spawn_time > timeout:
            raise ReadyTimeout(handle.task_id, handle.spawn_time + timeout, exited=False)
        return ready

    def wait_exit(self, handle: InstanceHandle, clock: Clock) -> tuple[TaskState, float]:
        return handle.backend.outcome, handle.backend.exit_at

    def kill(self, handle: InstanceHandle) -> None:
        pass

    def run_reduce(self, reduce: ReduceSpec, clock: Clock) -> int:
        return 0


# ---------------------------------------------------------------------------
# Real processes
# ---------------------------------------------------------------------------


class _SentinelReader(threading.Thread):
    """Drains a child's stdout, noting the instant the sentinel line appears."""

    def __init__(self, proc: subprocess.Popen, sentinel: str, clock: Clock):
        super().__init__(daemon=True)
        self.proc = proc
        self.sentinel = sentinel
        self.clock = clock
        self.ready_at: float | None = None
        self.signal = threading.Event()

    def run(self) -> None:
        try:
            for line in self.proc.stdout:
                if self.ready_at is None and line.rstrip("\r\n") == self.sentinel:
                    self.ready_at = self.clock.now()
                    self.signal.set()
        finally:
            self.signal.set()


class ProcessAdapter:
    """Spawns ``prefix + task.command`` with the staged payload as working directory."""

    virtual = False

    def __init__(self, spec: AdapterSpec):
        if spec.kind is AdapterKind.SIMULATED:
            raise AdapterConfigError("ProcessAdapter needs a proc or prefix AdapterSpec")
        self.spec = spec

    def argv(self, task: Task) -> list[str]:
        return [*self.spec.prefix, *task.command]

    def launch(self, task: Task, node_id: str, workdir: str | None, clock: Clock) -> InstanceHandle:
        env = dict(os.environ)
        env.update(self.spec.env)
        env["SWARMLAUNCH_TASK_ID"] = str(task.task_id)
        env["SWARMLAUNCH_NODE_ID"] = node_id
        spawn = clock.now()
        if self.spec.setup_command:
            try:
                r = subprocess.run(self.spec.setup_command, cwd=workdir, env=env, stdin=subprocess.DEVNULL,
                                   stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
            except OSError as e:
                raise SpawnFailed(task.task_id, f"setup command: {e}") from None
            if r.returncode != 0:
                raise SpawnFailed(task.task_id, f"setup command exited {r.returncode}")
        try:
            proc = subprocess.Popen(
                self.argv(task),
                cwd=workdir,
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                errors="replace",
            )
        except OSError as e:
            raise SpawnFailed(task.task_id, str(e)) from None
        reader = _SentinelReader(proc, f"{SENTINEL} {task.task_id}", clock)
        reader.start()
        return InstanceHandle(task.task_id, node_id, spawn, reader)

    def await_ready(self, handle: InstanceHandle, timeout: float | None, clock: Clock) -> float:
        reader: _SentinelReader = handle.backend
        if not reader.signal.wait(timeout):
            raise ReadyTimeout(handle.task_id, clock.now(), exited=False)
        if reader.ready_at is None:
            raise ReadyTimeout(handle.task_id, clock.now(), exited=True)
        return reader.ready_at

    def wait_exit(self, handle: InstanceHandle, clock: Clock) -> tuple[TaskState, float]:
        reader: _SentinelReader = handle.backend
        rc = reader.proc.wait()
        reader.join()
        return (TaskState.COMPLETED if rc == 0 else TaskState.FAILED), clock.now()

    def kill(self, handle: InstanceHandle) -> None:
        proc = handle.backend.proc
        if proc.poll() is None:
            proc.kill()
        proc.wait()

    def run_reduce(self, reduce: ReduceSpec, clock: Clock) -> int:
        try:
            return subprocess.run(reduce.command, stdin=subprocess.DEVNULL).returncode
        except OSError:
            return 127


def make_adapter(spec: AdapterSpec, seed: int = 0) -> SimulatedAdapter | ProcessAdapter:
    if spec.kind is AdapterKind.SIMULATED:
        return SimulatedAdapter(spec, seed)
    return ProcessAdapter(spec)


def launch_instance(task: Task, node_id: str, adapter, staged_location: str | None, clock: Clock) -> InstanceHandle:
    return adapter.launch(task, node_id, staged_location, clock)


def await_ready(handle: InstanceHandle, adapter, timeout: float | None, clock: Clock) -> float:
    return adapter.await_ready(handle, timeout, clock)


def wait_exit(handle: InstanceHandle, adapter, clock: Clock) -> tuple[TaskState, float]:
    return adapter.wait_exit(handle, clock)
