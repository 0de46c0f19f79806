"""Map-reduce frontend: scan inputs, build one array job with a task per input, attach a reduce step."""

from __future__ import annotations

import hashlib
import json
import os
import re
import shlex
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .core import ArrayJob, ReduceSpec, SwarmlaunchError, Task, TaskState
from .staging import PayloadManifest

PLACEHOLDER = "{input}"

_COUNT_RE = re.compile(r"^count[:=](\d+)$")


class SourceUnreadable(SwarmlaunchError):
    pass


class EmptyInputs(SwarmlaunchError):
    pass


class TemplateError(SwarmlaunchError):
    pass


class ReduceAlreadyAttached(SwarmlaunchError):
    pass


@dataclass(frozen=True)
class InputItem:
    name: str
    size_bytes: int = 0
    path: str | None = None

    @property
    def ref(self) -> str:
        """What gets substituted into the command: the file path, or the logical name."""
        return self.path if self.path is not None else self.name


@dataclass(frozen=True)
class JobTemplate:
    command: tuple[str, ...]
    adapter: str | None = None
    slots_per_task: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "command", tuple(self.command))
        n = sum(tok.count(PLACEHOLDER) for tok in self.command)
        if n != 1:
            raise TemplateError(f"template must contain exactly one {PLACEHOLDER} placeholder, found {n}")
        if self.slots_per_task < 1:
            raise TemplateError("slots_per_task must be >= 1")

    def render(self, item: InputItem) -> tuple[str, ...]:
        return tuple(tok.replace(PLACEHOLDER, item.ref) for tok in self.command)


def load_template(path: str | os.PathLike) -> JobTemplate:
    """Read a template file.

    ``*.json`` files hold ``{"command": [...], "adapter": ..., "slots_per_task": ...}``;
    anything else is a single shell-style command line (``#`` comments allowed).
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise TemplateError(f"cannot read template {p}: {e}") from None
    if p.suffix == ".json":
        try:
            data = json.loads(text)
            return JobTemplate(
                command=tuple(data["command"]),
                adapter=data.get("adapter"),
                slots_per_task=int(data.get("slots_per_task", 1)),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise TemplateError(f"bad template {p}: {e}") from None
    try:
        tokens = shlex.split(text, comments=True)
    except ValueError as e:
        raise TemplateError(f"bad template {p}: {e}") from None
    return JobTemplate(command=tuple(tokens))


def scan_inputs(source: str | os.PathLike) -> list[InputItem]:
    """One InputItem per file in a directory, or ``count:N`` synthetic items, in lexicographic order."""
    if isinstance(source, str):
        m = _COUNT_RE.match(source.strip())
        if m:
            count = int(m.group(1))
            width = len(str(max(count - 1, 0)))
            return [InputItem(f"input-{i:0{width}d}") for i in range(count)]
    root = Path(source)
    try:
        files = [p for p in root.iterdir() if p.is_file()]
    except OSError as e:
        raise SourceUnreadable(f"cannot scan {root}: {e}") from None
    files.sort(key=lambda p: p.name)
    return [InputItem(p.name, p.stat().st_size, str(p.resolve())) for p in files]


def _default_job_id(inputs: Sequence[InputItem], payload: PayloadManifest) -> str:
    h = hashlib.sha256(payload.digest.encode())
    for item in inputs:
        h.update(b"\0" + item.name.encode())
    return "job-" + h.hexdigest()[:12]


def generate_array_job(
    inputs: Sequence[InputItem],
    template: JobTemplate,
    payload: PayloadManifest,
    job_id: str | None = None,
    submit_time: float = 0.0,
) -> ArrayJob:
    if not inputs:
        raise EmptyInputs("cannot build an array job from zero inputs")
    names = [i.name for i in inputs]
    if len(set(names)) != len(names):
        raise ValueError("input names must be unique")
    tasks = tuple(
        Task(
            task_id=i,
            input_ref=item.ref,
            command=template.render(item),
            timestamps=((TaskState.PENDING, submit_time),),
        )
        for i, item in enumerate(inputs)
    )
    return ArrayJob(
        job_id=job_id or _default_job_id(inputs, payload),
        tasks=tasks,
        payload=payload,
        submit_time=submit_time,
        slots_per_task=template.slots_per_task,
    )


def attach_reduce(job: ArrayJob, reduce: ReduceSpec) -> ArrayJob:
    if job.reduce is not None:
        raise ReduceAlreadyAttached(f"job {job.job_id} already has a reduce step")
    return replace(job, reduce=reduce)


def resubmit(job: ArrayJob, submit_time: float) -> ArrayJob:
    """The same job with every task reset to Pending at ``submit_time``."""
    tasks = tuple(
        Task(t.task_id, t.input_ref, t.command, timestamps=((TaskState.PENDING, submit_time),)) for t in job.tasks
    )
    return replace(job, tasks=tasks, submit_time=submit_time)


def render_script(job: ArrayJob) -> str:
    """Human-readable array-job script. Not guaranteed to be accepted by any real scheduler."""
    lines = [
        "#!/bin/bash",
        f"# array job {job.job_id}: {len(job.tasks)} tasks, {job.slots_per_task} slot(s) per task",
        f"# payload {job.payload.digest} ({job.payload.total_bytes} bytes)",
        f"#ARRAY 0-{len(job.tasks) - 1}",
        "",
        'case "$ARRAY_TASK_ID" in',
    ]
    for t in job.tasks:
        lines.append(f"  {t.task_id}) exec {shlex.join(t.command)} ;;")
    lines += ['  *) echo "unknown task id $ARRAY_TASK_ID" >&2; exit 1 ;;', "esac"]
    if job.reduce is not None:
        lines += ["", f"# reduce (after all tasks complete): {shlex.join(job.reduce.command)}"]
    return "\n".join(lines) + "\n"
