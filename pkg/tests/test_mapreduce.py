import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from swarmlaunch.core import ReduceSpec, TaskState
from swarmlaunch.mapreduce import (
    PLACEHOLDER,
    EmptyInputs,
    InputItem,
    JobTemplate,
    ReduceAlreadyAttached,
    SourceUnreadable,
    TemplateError,
    attach_reduce,
    generate_array_job,
    load_template,
    render_script,
    scan_inputs,
)
from swarmlaunch.staging import synthetic_manifest

PAYLOAD = synthetic_manifest()
TEMPLATE = JobTemplate(("APP.EXE", "--in", "{input}"))


def test_scan_directory_sorted(tmp_path):
    for name in ["c.dat", "a.dat", "b.dat"]:
        (tmp_path / name).write_bytes(b"x" * 3)
    (tmp_path / "sub").mkdir()
    items = scan_inputs(tmp_path)
    assert [i.name for i in items] == ["a.dat", "b.dat", "c.dat"]
    assert all(i.size_bytes == 3 for i in items)


def test_scan_empty_directory(tmp_path):
    assert scan_inputs(tmp_path) == []


def test_scan_missing_directory(tmp_path):
    with pytest.raises(SourceUnreadable):
        scan_inputs(tmp_path / "nope")


def test_synthetic_full_scale():
    items = scan_inputs("count=16384")
    assert len(items) == 16384
    assert len({i.name for i in items}) == 16384
    assert scan_inputs("count:16384") == items
    assert [i.name for i in items] == sorted(i.name for i in items)


def test_generate_three():
    job = generate_array_job([InputItem(n) for n in "abc"], TEMPLATE, PAYLOAD)
    assert [t.task_id for t in job.tasks] == [0, 1, 2]
    assert all(t.state is TaskState.PENDING for t in job.tasks)
    assert job.tasks[1].command == ("APP.EXE", "--in", "b")


def test_generate_full_scale_single_job():
    job = generate_array_job(scan_inputs("count:16384"), TEMPLATE, PAYLOAD)
    assert len(job.tasks) == 16384
    assert job.tasks[-1].task_id == 16383


def test_generate_empty():
    with pytest.raises(EmptyInputs):
        generate_array_job([], TEMPLATE, PAYLOAD)


@pytest.mark.parametrize("cmd", [("APP.EXE",), ("APP.EXE", "{input}", "{input}"), ("a{input}{input}",)])
def test_placeholder_count(cmd):
    with pytest.raises(TemplateError):
        JobTemplate(cmd)


def test_slots_per_task_positive():
    with pytest.raises(TemplateError):
        JobTemplate(("x", "{input}"), slots_per_task=0)


def test_attach_reduce():
    job = generate_array_job([InputItem("a")], TEMPLATE, PAYLOAD)
    spec = ReduceSpec(("collect",))
    with_reduce = attach_reduce(job, spec)
    assert with_reduce.reduce == spec and job.reduce is None
    with pytest.raises(ReduceAlreadyAttached):
        attach_reduce(with_reduce, spec)


def test_load_template_forms(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("# comment\nwine APP.EXE --file '{input}'\n")
    assert load_template(p).command == ("wine", "APP.EXE", "--file", "{input}")
    j = tmp_path / "t.json"
    j.write_text(json.dumps({"command": ["run", "{input}"], "slots_per_task": 2}))
    assert load_template(j).slots_per_task == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("no placeholder here")
    with pytest.raises(TemplateError):
        load_template(bad)


def test_script_dump():
    job = attach_reduce(generate_array_job(scan_inputs("count:3"), TEMPLATE, PAYLOAD), ReduceSpec(("sum",)))
    text = render_script(job)
    assert "#ARRAY 0-2" in text and "2) exec APP.EXE --in input-2" in text and "reduce" in text


names = st.lists(
    st.text("abcxyz0123._-", min_size=1, max_size=8).filter(lambda n: n not in (".", "..")),
    min_size=1,
    max_size=30,
    unique=True,
)


@given(names)
def test_job_invariants(ns):
    items = [InputItem(n) for n in ns]
    job = generate_array_job(items, TEMPLATE, PAYLOAD)
    assert len(job.tasks) == len(items)
    assert all(PLACEHOLDER not in tok for t in job.tasks for tok in t.command)
    assert [t.input_ref for t in job.tasks] == ns


@given(names)
def test_rescan_is_stable(tmp_path_factory, ns):
    d = tmp_path_factory.mktemp("inputs")
    for n in reversed(ns):
        (d / n).write_text(n)
    a = generate_array_job(scan_inputs(d), TEMPLATE, PAYLOAD, job_id="a")
    b = generate_array_job(scan_inputs(d), TEMPLATE, PAYLOAD, job_id="b")
    assert a.tasks == b.tasks
    assert [t.input_ref.rsplit("/", 1)[-1] for t in a.tasks] == sorted(ns)
