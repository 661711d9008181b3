"""Canonical representation of recorded agent runs and their power logs.

A corpus directory holds one ``<run_id>.trace`` and one ``<run_id>.power``
JSON document per run, plus an optional ``labels.csv`` (run_id,outcome)
whose outcomes take precedence over the ones stored in the trace files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

SCHEMA_VERSION = 1
TRACE_SUFFIX = ".trace"
POWER_SUFFIX = ".power"
LABELS_FILE = "labels.csv"


class TraceError(ValueError):
    """A trace or power file violates the schema or a data invariant."""


class SchemaError(TraceError):
    pass


class InvariantError(TraceError):
    pass


@dataclass(frozen=True)
class TokenEvent:
    text: str
    logprob: float


@dataclass(frozen=True)
class ToolCallRecord:
    name: str
    started_ms: int
    ended_ms: int
    is_error: bool = False
    output_chars: int = 0


@dataclass(frozen=True)
class Step:
    index: int
    inference_started_ms: int
    inference_ended_ms: int
    tokens: tuple[TokenEvent, ...] = ()
    tool_calls: tuple[ToolCallRecord, ...] = ()

    @property
    def logprobs(self) -> list[float]:
        return [t.logprob for t in self.tokens]

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    @property
    def ended_ms(self) -> int:
        """End of the last event (inference or tool call) of this step."""
        end = self.inference_ended_ms
        for call in self.tool_calls:
            end = max(end, call.ended_ms)
        return end


@dataclass(frozen=True)
class Trajectory:
    run_id: str
    task_id: str
    steps: tuple[Step, ...]
    outcome: int
    forced_final: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def started_ms(self) -> int:
        return self.steps[0].inference_started_ms

    @property
    def ended_ms(self) -> int:
        return self.steps[-1].ended_ms


@dataclass(frozen=True)
class PowerSample:
    t_ms: int
    component_mw: Mapping[str, float]


@dataclass(frozen=True)
class PowerTrace:
    run_id: str
    samples: tuple[PowerSample, ...]
    nominal_interval_ms: int = 100
    baseline_cpu_mw: float | None = None

    def components(self) -> list[str]:
        names: set[str] = set()
        for s in self.samples:
            names.update(s.component_mw)
        return sorted(names)

    def series(self, component: str) -> tuple[list[int], list[float]]:
        """Timestamps and power for one component; absent readings count as 0 mW."""
        return (
            [s.t_ms for s in self.samples],
            [float(s.component_mw.get(component, 0.0)) for s in self.samples],
        )


@dataclass(frozen=True)
class RunBundle:
    trajectory: Trajectory
    power: PowerTrace
    baseline_cpu_mw: float = 0.0

    @property
    def run_id(self) -> str:
        return self.trajectory.run_id


@dataclass(frozen=True)
class IngestConfig:
    # Allowed distance between the power span and the trajectory span.
    coverage_slack_ms: int = 1000
    baseline_cpu_mw: float = 0.0
    check_coverage: bool = True


# --------------------------------------------------------------------------- parsing

def _require(obj: Mapping[str, Any], key: str, kind, where: str):
    if not isinstance(obj, Mapping):
        raise SchemaError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise SchemaError(f"{where}: missing field '{key}'")
    value = obj[key]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and not math.isfinite(value):
            raise SchemaError(f"{where}: field '{key}' must be finite")
    else:
        ok = isinstance(value, kind)
    if not ok:
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise SchemaError(f"{where}: field '{key}' must be {name}, got {type(value).__name__}")
    return value


def _check_version(doc: Mapping[str, Any], where: str) -> None:
    version = _require(doc, "schema_version", int, where)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{where}: unsupported schema_version {version}")


def trajectory_from_dict(doc: Mapping[str, Any]) -> Trajectory:
    _check_version(doc, "trace")
    run_id = _require(doc, "run_id", str, "trace")
    task_id = _require(doc, "task_id", str, "trace")
    outcome = _require(doc, "outcome", int, "trace")
    forced_final = _require(doc, "forced_final", bool, "trace")
    raw_steps = _require(doc, "steps", list, "trace")
    if outcome not in (0, 1):
        raise InvariantError(f"outcome must be 0 or 1, got {outcome}")
    if not run_id:
        raise InvariantError("run_id must be non-empty")

    steps = []
    for pos, raw in enumerate(raw_steps):
        where = f"steps[{pos}]"
        tokens = []
        for j, tok in enumerate(_require(raw, "tokens", list, where)):
            tw = f"{where}.tokens[{j}]"
            tokens.append(TokenEvent(_require(tok, "text", str, tw), float(_require(tok, "logprob", float, tw))))
        calls = []
        for j, call in enumerate(_require(raw, "tool_calls", list, where)):
            cw = f"{where}.tool_calls[{j}]"
            calls.append(
                ToolCallRecord(
                    name=_require(call, "name", str, cw),
                    started_ms=_require(call, "started_ms", int, cw),
                    ended_ms=_require(call, "ended_ms", int, cw),
                    is_error=_require(call, "is_error", bool, cw),
                    output_chars=_require(call, "output_chars", int, cw),
                )
            )
        steps.append(
            Step(
                index=_require(raw, "index", int, where),
                inference_started_ms=_require(raw, "inference_started_ms", int, where),
                inference_ended_ms=_require(raw, "inference_ended_ms", int, where),
                tokens=tuple(tokens),
                tool_calls=tuple(calls),
            )
        )
    traj = Trajectory(run_id, task_id, tuple(steps), outcome, forced_final)
    validate_trajectory(traj)
    return traj


def power_from_dict(doc: Mapping[str, Any]) -> PowerTrace:
    _check_version(doc, "power")
    run_id = _require(doc, "run_id", str, "power")
    interval = _require(doc, "nominal_interval_ms", int, "power")
    baseline = doc.get("baseline_cpu_mw")
    if baseline is not None:
        baseline = float(_require(doc, "baseline_cpu_mw", float, "power"))
    samples = []
    for pos, raw in enumerate(_require(doc, "samples", list, "power")):
        where = f"samples[{pos}]"
        comps = _require(raw, "components", Mapping, where)
        parsed = {}
        for name, mw in comps.items():
            parsed[str(name)] = float(_require(comps, name, float, f"{where}.components"))
        samples.append(PowerSample(_require(raw, "t_ms", int, where), parsed))
    power = PowerTrace(run_id, tuple(samples), interval, baseline)
    validate_power(power)
    return power


def trajectory_to_dict(traj: Trajectory) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "run_id": traj.run_id,
        "task_id": traj.task_id,
        "outcome": traj.outcome,
        "forced_final": traj.forced_final,
        "steps": [
            {
                "index": s.index,
                "inference_started_ms": s.inference_started_ms,
                "inference_ended_ms": s.inference_ended_ms,
                "tokens": [{"text": t.text, "logprob": t.logprob} for t in s.tokens],
                "tool_calls": [
                    {
                        "name": c.name,
                        "started_ms": c.started_ms,
                        "ended_ms": c.ended_ms,
                        "is_error": c.is_error,
                        "output_chars": c.output_chars,
                    }
                    for c in s.tool_calls
                ],
            }
            for s in traj.steps
        ],
    }


def power_to_dict(power: PowerTrace) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "run_id": power.run_id,
        "nominal_interval_ms": power.nominal_interval_ms,
    }
    if power.baseline_cpu_mw is not None:
        doc["baseline_cpu_mw"] = power.baseline_cpu_mw
    doc["samples"] = [{"t_ms": s.t_ms, "components": dict(s.component_mw)} for s in power.samples]
    return doc


def dumps(doc: Mapping[str, Any]) -> str:
    """Stable text form: sorted keys, no spaces, trailing newline."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"


# --------------------------------------------------------------------------- invariants

def validate_trajectory(traj: Trajectory) -> None:
    if not traj.steps:
        raise InvariantError("trajectory has no steps")
    indices = [s.index for s in traj.steps]
    if indices != list(range(1, len(indices) + 1)):
        raise InvariantError(f"non-contiguous step indices {indices}")
    prev_end = None
    for step in traj.steps:
        where = f"step {step.index}"
        if step.inference_ended_ms < step.inference_started_ms:
            raise InvariantError(f"{where}: inference ends before it starts")
        if prev_end is not None and step.inference_started_ms < prev_end:
            raise InvariantError(f"{where}: overlaps the previous step")
        for tok in step.tokens:
            if not tok.text:
                raise InvariantError(f"{where}: empty token text")
            if not tok.logprob <= 0.0:
                raise InvariantError(f"{where}: positive logprob {tok.logprob}")
        cursor = step.inference_ended_ms
        for call in step.tool_calls:
            if call.ended_ms < call.started_ms:
                raise InvariantError(f"{where}: tool call '{call.name}' ends before it starts")
            if call.started_ms < step.inference_ended_ms:
                raise InvariantError(f"{where}: tool call '{call.name}' starts before inference ends")
            if call.started_ms < cursor:
                raise InvariantError(f"{where}: overlapping tool calls")
            if call.output_chars < 0:
                raise InvariantError(f"{where}: negative output_chars")
            cursor = call.ended_ms
        prev_end = step.ended_ms


def validate_power(power: PowerTrace) -> None:
    prev = None
    for s in power.samples:
        if prev is not None and s.t_ms <= prev:
            raise InvariantError(f"non-increasing timestamps at t_ms={s.t_ms}")
        for name, mw in s.component_mw.items():
            if mw < 0:
                raise InvariantError(f"negative power {mw} for '{name}' at t_ms={s.t_ms}")
        prev = s.t_ms
    if power.nominal_interval_ms <= 0:
        raise InvariantError("nominal_interval_ms must be positive")
    if power.baseline_cpu_mw is not None and power.baseline_cpu_mw < 0:
        raise InvariantError("baseline_cpu_mw must be nonnegative")


def make_bundle(traj: Trajectory, power: PowerTrace, config: IngestConfig | None = None) -> RunBundle:
    config = config or IngestConfig()
    if traj.run_id != power.run_id:
        raise InvariantError(f"run_id mismatch: trace '{traj.run_id}' vs power '{power.run_id}'")
    if not power.samples:
        raise InvariantError("power trace has no samples")
    if config.check_coverage:
        first, last = power.samples[0].t_ms, power.samples[-1].t_ms
        slack = config.coverage_slack_ms
        if first > traj.started_ms + slack or last < traj.ended_ms - slack:
            raise InvariantError(
                f"power samples [{first},{last}] ms do not cover run span "
                f"[{traj.started_ms},{traj.ended_ms}] ms (slack {slack})"
            )
    baseline = power.baseline_cpu_mw if power.baseline_cpu_mw is not None else config.baseline_cpu_mw
    if baseline < 0:
        raise InvariantError("baseline_cpu_mw must be nonnegative")
    return RunBundle(traj, power, float(baseline))


# --------------------------------------------------------------------------- files

def _read_json(path: Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{Path(path).name}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc


def load_trajectory(path: str | Path) -> Trajectory:
    return trajectory_from_dict(_read_json(Path(path)))


def load_power(path: str | Path) -> PowerTrace:
    return power_from_dict(_read_json(Path(path)))


def load_bundle(trace_path: str | Path, power_path: str | Path, config: IngestConfig | None = None) -> RunBundle:
    """Load and validate one run; raises :class:`TraceError` on any defect."""
    return make_bundle(load_trajectory(trace_path), load_power(power_path), config)


def write_bundle(bundle: RunBundle, directory: str | Path) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trace_path = directory / f"{bundle.run_id}{TRACE_SUFFIX}"
    power_path = directory / f"{bundle.run_id}{POWER_SUFFIX}"
    power = bundle.power
    if power.baseline_cpu_mw is None and bundle.baseline_cpu_mw:
        power = replace(power, baseline_cpu_mw=bundle.baseline_cpu_mw)
    trace_path.write_text(dumps(trajectory_to_dict(bundle.trajectory)), encoding="utf-8")
    power_path.write_text(dumps(power_to_dict(power)), encoding="utf-8")
    return trace_path, power_path


def read_labels(path: str | Path) -> dict[str, int]:
    labels: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                run_id, outcome = row["run_id"], int(row["outcome"])
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: bad row {row}") from exc
            if outcome not in (0, 1):
                raise InvariantError(f"{path}: outcome for {run_id} must be 0 or 1")
            labels[run_id] = outcome
    return labels


@dataclass
class ValidationReport:
    entries: dict[str, str | None] = field(default_factory=dict)  # file name -> first error or None

    @property
    def ok(self) -> int:
        return sum(1 for e in self.entries.values() if e is None)

    @property
    def failed(self) -> int:
        return sum(1 for e in self.entries.values() if e is not None)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "failed": self.failed,
            "files": [{"file": k, "error": v} for k, v in sorted(self.entries.items())],
        }


def _corpus_stems(directory: Path) -> list[str]:
    stems = {p.stem for p in directory.iterdir() if p.suffix in (TRACE_SUFFIX, POWER_SUFFIX)}
    return sorted(stems)


def iter_corpus(directory: str | Path, config: IngestConfig | None = None) -> Iterable[tuple[str, RunBundle | TraceError]]:
    """Yield ``(trace file name, bundle or error)`` for every run in sorted order.

    Labels from ``labels.csv`` are applied, and duplicate run ids are reported
    as errors on the later file.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise NotADirectoryError(f"corpus directory not found: {directory}")
    labels: dict[str, int] = {}
    label_error: TraceError | None = None
    if (directory / LABELS_FILE).exists():
        try:
            labels = read_labels(directory / LABELS_FILE)
        except TraceError as exc:
            label_error = exc
    if label_error is not None:
        yield LABELS_FILE, label_error
    seen: set[str] = set()
    for stem in _corpus_stems(directory):
        trace_path = directory / f"{stem}{TRACE_SUFFIX}"
        power_path = directory / f"{stem}{POWER_SUFFIX}"
        name = trace_path.name
        if not trace_path.exists():
            yield power_path.name, SchemaError(f"missing trace file for {power_path.name}")
            continue
        if not power_path.exists():
            yield name, SchemaError(f"missing power file {power_path.name}")
            continue
        try:
            bundle = load_bundle(trace_path, power_path, config)
        except TraceError as exc:
            yield name, exc
            continue
        except Exception as exc:  # loader must never crash on file content
            yield name, SchemaError(f"unexpected content: {exc!r}")
            continue
        if bundle.run_id in seen:
            yield name, InvariantError(f"duplicate run_id '{bundle.run_id}'")
            continue
        seen.add(bundle.run_id)
        if bundle.run_id in labels:
            bundle = replace(bundle, trajectory=replace(bundle.trajectory, outcome=labels[bundle.run_id]))
        yield name, bundle


def validate_corpus(directory: str | Path, config: IngestConfig | None = None) -> ValidationReport:
    report = ValidationReport()
    for name, result in iter_corpus(directory, config):
        report.entries[name] = str(result) if isinstance(result, TraceError) else None
    return report


def load_corpus(directory: str | Path, config: IngestConfig | None = None) -> list[RunBundle]:
    """Load every bundle in ``directory``; the first invalid file raises."""
    bundles = []
    for name, result in iter_corpus(directory, config):
        if isinstance(result, TraceError):
            raise type(result)(f"{name}: {result}")
        bundles.append(result)
    return bundles
