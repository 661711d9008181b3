import json

import pytest
from hypothesis import given, settings, strategies as st

from conftest import power, simple_traj, step, traj
from stopwatt.synth import SynthSpec, synthesize_corpus
from stopwatt.trace_model import (
    IngestConfig,
    InvariantError,
    RunBundle,
    SchemaError,
    TraceError,
    dumps,
    load_bundle,
    load_corpus,
    make_bundle,
    power_from_dict,
    power_to_dict,
    trajectory_from_dict,
    trajectory_to_dict,
    validate_corpus,
    write_bundle,
)


def minimal_docs():
    trace = {
        "schema_version": 1, "run_id": "r1", "task_id": "t1", "outcome": 1, "forced_final": False,
        "steps": [{
            "index": 1, "inference_started_ms": 0, "inference_ended_ms": 150,
            "tokens": [{"text": "hi", "logprob": -0.2}], "tool_calls": [],
        }],
    }
    pw = {
        "schema_version": 1, "run_id": "r1", "nominal_interval_ms": 100,
        "samples": [{"t_ms": t, "components": {"gpu": 10.0}} for t in (0, 100, 200)],
    }
    return trace, pw


def write_docs(tmp_path, name, trace, pw):
    (tmp_path / f"{name}.trace").write_text(json.dumps(trace))
    (tmp_path / f"{name}.power").write_text(json.dumps(pw))


def test_minimal_bundle(tmp_path):
    trace, pw = minimal_docs()
    write_docs(tmp_path, "r1", trace, pw)
    b = load_bundle(tmp_path / "r1.trace", tmp_path / "r1.power")
    assert b.trajectory.n_steps == 1
    assert len(b.power.samples) == 3
    assert b.trajectory.steps[0].logprobs == [-0.2]


def test_non_contiguous_step_indices():
    trace, _ = minimal_docs()
    s2 = dict(trace["steps"][0], index=3, inference_started_ms=200, inference_ended_ms=300)
    trace["steps"].append(s2)
    with pytest.raises(InvariantError, match="non-contiguous step indices"):
        trajectory_from_dict(trace)


def test_non_increasing_timestamps():
    _, pw = minimal_docs()
    pw["samples"] = [{"t_ms": t, "components": {"gpu": 1.0}} for t in (0, 100, 100)]
    with pytest.raises(InvariantError, match="non-increasing timestamps"):
        power_from_dict(pw)


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["steps"][0]["tokens"][0].update(logprob=0.5), "positive logprob"),
    (lambda d: d["steps"][0]["tokens"][0].update(text=""), "empty token text"),
    (lambda d: d["steps"][0].update(inference_ended_ms=-1), "ends before it starts"),
    (lambda d: d.update(outcome=2), "outcome"),
    (lambda d: d.update(schema_version=9), "schema_version"),
    (lambda d: d["steps"][0].pop("tokens"), "missing field 'tokens'"),
    (lambda d: d.update(steps=[]), "no steps"),
    (lambda d: d["steps"][0]["tool_calls"].append(
        {"name": "x", "started_ms": 100, "ended_ms": 200, "is_error": False, "output_chars": 0}),
     "starts before inference ends"),
])
def test_trace_rejections(mutate, message):
    trace, _ = minimal_docs()
    mutate(trace)
    with pytest.raises(TraceError, match=message):
        trajectory_from_dict(trace)


def test_negative_power_rejected():
    _, pw = minimal_docs()
    pw["samples"][1]["components"]["gpu"] = -1.0
    with pytest.raises(InvariantError, match="negative power"):
        power_from_dict(pw)


def test_bundle_coverage_and_run_id():
    t = simple_traj(2)  # spans [0, 2000]
    make_bundle(t, power("r1", [0, 2000], gpu=1.0))
    make_bundle(t, power("r1", [500, 1500], gpu=1.0))  # inside the 1000 ms slack
    with pytest.raises(InvariantError, match="do not cover"):
        make_bundle(t, power("r1", [1500, 1600], gpu=1.0))
    with pytest.raises(InvariantError, match="run_id mismatch"):
        make_bundle(t, power("other", [0, 2000], gpu=1.0))
    b = make_bundle(t, power("r1", [0, 2000], gpu=1.0), IngestConfig(baseline_cpu_mw=250.0))
    assert b.baseline_cpu_mw == 250.0


def test_round_trip_is_byte_stable(tmp_path):
    t = traj([step(1, 0, 100, [-0.1, -0.3], tools=[("web_search", 120, 400)]),
              step(2, 450, 600, [-0.0, -1.5])], outcome=0)
    b = RunBundle(t, power("r1", [0, 300, 600], gpu=[1.0, 2.5, 3.0], cpu=400.0), 120.0)
    tp, pp = write_bundle(b, tmp_path)
    loaded = load_bundle(tp, pp)
    assert loaded.trajectory == t
    assert loaded.baseline_cpu_mw == 120.0
    assert dumps(trajectory_to_dict(loaded.trajectory)) == tp.read_text()
    assert dumps(power_to_dict(loaded.power)) == pp.read_text()


def test_validate_corpus_counts(tmp_path):
    trace, pw = minimal_docs()
    for rid in ("a", "b"):
        write_docs(tmp_path, rid, dict(trace, run_id=rid), dict(pw, run_id=rid))
    bad = dict(trace, run_id="c")
    bad["steps"] = [dict(trace["steps"][0], index=2)]
    write_docs(tmp_path, "c", bad, dict(pw, run_id="c"))
    report = validate_corpus(tmp_path)
    assert (report.ok, report.failed) == (2, 1)
    assert "non-contiguous" in report.entries["c.trace"]


def test_validate_empty_and_duplicate(tmp_path):
    report = validate_corpus(tmp_path)
    assert (report.ok, report.failed) == (0, 0)
    trace, pw = minimal_docs()
    write_docs(tmp_path, "a", trace, pw)
    write_docs(tmp_path, "b", trace, pw)  # same run_id r1 in both
    report = validate_corpus(tmp_path)
    assert (report.ok, report.failed) == (1, 1)
    assert "duplicate run_id" in report.entries["b.trace"]


def test_garbage_file_is_reported_not_raised(tmp_path):
    (tmp_path / "x.trace").write_text("{not json")
    (tmp_path / "x.power").write_text("[]")
    (tmp_path / "y.trace").write_text(json.dumps({"schema_version": 1, "steps": "no"}))
    (tmp_path / "y.power").write_text("null")
    report = validate_corpus(tmp_path)
    assert report.failed == 2
    with pytest.raises(TraceError):
        load_corpus(tmp_path)


def test_labels_override(tmp_path):
    trace, pw = minimal_docs()
    write_docs(tmp_path, "r1", trace, pw)
    (tmp_path / "labels.csv").write_text("run_id,outcome\nr1,0\n")
    assert load_corpus(tmp_path)[0].trajectory.outcome == 0


def test_synth_is_deterministic(tmp_path):
    spec = SynthSpec(n=10, success_rate=0.5, shift=0.0)
    a = synthesize_corpus(spec, 7, tmp_path / "a")
    synthesize_corpus(spec, 7, tmp_path / "b")
    assert sum(b.trajectory.outcome for b in a) == 5
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert validate_corpus(tmp_path / "a").failed == 0


lp = st.floats(min_value=-30.0, max_value=0.0, allow_nan=False)


@st.composite
def trajectories(draw):
    n = draw(st.integers(1, 4))
    steps, t = [], draw(st.integers(0, 1000))
    for i in range(1, n + 1):
        dur = draw(st.integers(0, 500))
        lps = draw(st.lists(lp, max_size=6))
        texts = draw(st.lists(st.text(min_size=1, max_size=4), min_size=len(lps), max_size=len(lps)))
        tools = []
        cursor = t + dur
        for j in range(draw(st.integers(0, 2))):
            a = cursor + draw(st.integers(0, 50))
            b = a + draw(st.integers(0, 300))
            tools.append((f"tool{j}", a, b))
            cursor = b
        steps.append(step(i, t, t + dur, lps, texts, tools))
        t = cursor + draw(st.integers(0, 100))
    return traj(steps, draw(st.integers(0, 1)), draw(st.text(min_size=1, max_size=8)))


@settings(max_examples=60, deadline=None)
@given(trajectories())
def test_trajectory_round_trip_property(t):
    doc = json.loads(dumps(trajectory_to_dict(t)))
    assert trajectory_from_dict(doc) == t
