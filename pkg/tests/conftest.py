from __future__ import annotations

import numpy as np
import pytest

from stopwatt.energy import build_ledger
from stopwatt.features import FeatureConfig, build_matrix
from stopwatt.model_selection import nested_cv
from stopwatt.synth import SynthSpec, generate
from stopwatt.trace_model import (
    PowerSample,
    PowerTrace,
    RunBundle,
    Step,
    TokenEvent,
    ToolCallRecord,
    Trajectory,
)

PLANTED_SHIFT = 1.5
PLANTED_SEED = 42


def step(index, start, end, logprobs=(), texts=None, tools=()):
    texts = texts if texts is not None else [f"t{i}" for i in range(len(logprobs))]
    tokens = tuple(TokenEvent(t, float(lp)) for t, lp in zip(texts, logprobs))
    calls = tuple(ToolCallRecord(name, a, b) for name, a, b in tools)
    return Step(index, start, end, tokens, calls)


def traj(steps, outcome=1, run_id="r1", task_id="task"):
    return Trajectory(run_id, task_id, tuple(steps), outcome)


def simple_traj(n_steps, outcome=1, run_id="r1", logprobs=(-0.1, -0.5, -2.0), step_ms=1000):
    """``n_steps`` back-to-back inference-only steps of ``step_ms`` each."""
    return traj([step(i + 1, i * step_ms, (i + 1) * step_ms, logprobs) for i in range(n_steps)],
                outcome, run_id)


def power(run_id, times, **components):
    n = len(times)
    cols = {k: list(v) if np.ndim(v) else [float(v)] * n for k, v in components.items()}
    samples = tuple(PowerSample(int(t), {k: float(cols[k][i]) for k in cols}) for i, t in enumerate(times))
    return PowerTrace(run_id, samples)


def bundle(trajectory, baseline=0.0, **components):
    times = [trajectory.started_ms, trajectory.ended_ms]
    return RunBundle(trajectory, power(trajectory.run_id, times, **components), baseline)


# --------------------------------------------------------------------------- shared corpora

def _corpus(shift: float, seed: int, n: int = 200):
    bundles = generate(SynthSpec(n=n, shift=shift), seed)
    return [(b.trajectory, build_ledger(b)) for b in bundles]


@pytest.fixture(scope="session")
def planted_corpus():
    return _corpus(PLANTED_SHIFT, PLANTED_SEED)


@pytest.fixture(scope="session")
def null_corpus():
    return _corpus(0.0, PLANTED_SEED)


@pytest.fixture(scope="session")
def planted_cv(planted_corpus):
    matrix = build_matrix([t for t, _ in planted_corpus], FeatureConfig(step=3))
    report, models = nested_cv(matrix, seed=PLANTED_SEED)
    return matrix, report, models


@pytest.fixture(scope="session")
def null_cv(null_corpus):
    matrix = build_matrix([t for t, _ in null_corpus], FeatureConfig(step=3))
    report, models = nested_cv(matrix, seed=PLANTED_SEED)
    return matrix, report, models


# --------------------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
