"""Synthetic labeled corpora with a controllable success/failure separation.

Failed runs take more steps, and with ``shift > 0`` they also get heavier
low-confidence logprob tails, slightly longer steps and more repetition of the
previous step's tokens. With ``shift = 0`` the per-step token streams of both
classes are drawn from the same distribution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .seeding import derive_seed
from .trace_model import (
    PowerSample,
    PowerTrace,
    RunBundle,
    Step,
    TokenEvent,
    ToolCallRecord,
    Trajectory,
    write_bundle,
)


@dataclass(frozen=True)
class SynthSpec:
    n: int = 200
    success_rate: float = 0.5
    shift: float = 1.0
    success_steps: tuple[int, int] = (2, 7)
    failure_steps: tuple[int, int] = (3, 10)
    max_steps: int = 10
    tokens_per_step: tuple[int, int] = (6, 160)
    vocab_size: int = 400
    n_tasks: int = 100
    interval_ms: int = 100
    baseline_cpu_mw: float = 1000.0

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items() if k in known}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def _logprobs(rng: np.random.Generator, n: int, tail_scale: float) -> np.ndarray:
    confident = -rng.exponential(0.02, size=n)
    uncertain = rng.random(n) < 0.12
    lp = np.where(uncertain, -rng.exponential(tail_scale, size=n), confident)
    return np.round(lp, 6) + 0.0  # +0.0 turns -0.0 into 0.0


def _run(spec: SynthSpec, i: int, outcome: int, seed: int) -> RunBundle:
    rng = np.random.default_rng(derive_seed(seed, "run", i))
    fail = outcome == 0
    lo, hi = spec.failure_steps if fail else spec.success_steps
    n_steps = int(rng.integers(lo, hi + 1))
    forced = n_steps >= spec.max_steps
    if forced:
        n_steps = spec.max_steps + 1
    # run-level latent confidence; failures shifted toward heavier tails
    run_scale = math.exp(rng.normal(0.0, 0.25) + (0.9 * spec.shift if fail else 0.0))
    repeat_p = 0.1 + (0.15 * spec.shift if fail else 0.0)
    token_mult = 1.0 + (0.15 * spec.shift if fail else 0.0)

    steps: list[Step] = []
    t = int(rng.integers(0, 50))
    prev_texts: list[str] = []
    for idx in range(1, n_steps + 1):
        n_tok = int(rng.integers(spec.tokens_per_step[0], spec.tokens_per_step[1] + 1) * token_mult)
        step_scale = 0.6 * run_scale * math.exp(rng.normal(0.0, 0.5))
        lps = _logprobs(rng, n_tok, step_scale)
        words = rng.integers(0, spec.vocab_size, size=n_tok)
        texts = [f"w{w}" for w in words]
        if prev_texts:
            reuse = rng.random(n_tok) < repeat_p
            src = rng.integers(0, len(prev_texts), size=n_tok)
            texts = [prev_texts[s] if r else w for w, r, s in zip(texts, reuse, src)]
        tokens = tuple(TokenEvent(w, float(lp)) for w, lp in zip(texts, lps))
        inf_start = t
        inf_end = inf_start + 150 + 25 * n_tok + int(rng.integers(0, 100))
        calls = []
        cursor = inf_end
        last = idx == n_steps
        for _ in range(0 if last else int(rng.integers(1, 3))):
            start = cursor + int(rng.integers(0, 150))
            end = start + int(rng.integers(300, 3000))
            calls.append(ToolCallRecord("python_exec" if rng.random() < 0.5 else "web_search", start, end,
                                        bool(rng.random() < 0.1), int(rng.integers(0, 5000))))
            cursor = end
        steps.append(Step(idx, inf_start, inf_end, tokens, tuple(calls)))
        prev_texts = texts
        t = cursor + int(rng.integers(0, 200))

    traj = Trajectory(f"run{i:04d}", f"task{i % spec.n_tasks:04d}", tuple(steps), outcome, forced)
    return RunBundle(traj, _power(spec, traj, rng), spec.baseline_cpu_mw)


def _power(spec: SynthSpec, traj: Trajectory, rng: np.random.Generator) -> PowerTrace:
    end = traj.ended_ms + spec.interval_ms
    times = np.arange(0, end + 1, spec.interval_ms)
    keep = rng.random(times.size) > 0.01  # occasional dropped sample
    keep[0] = keep[-1] = True
    times = times[keep]
    gpu = np.full(times.size, 80.0)
    cpu = np.full(times.size, spec.baseline_cpu_mw + 100.0)
    for step in traj.steps:
        inf = (times >= step.inference_started_ms) & (times <= step.inference_ended_ms)
        gpu[inf] = 18000.0
        cpu[inf] = 2500.0
        for call in step.tool_calls:
            tool = (times >= call.started_ms) & (times <= call.ended_ms)
            gpu[tool] = 150.0
            cpu[tool] = 1800.0
    gpu = np.clip(gpu + rng.normal(0, 0.05, times.size) * gpu, 0, None).round(1)
    cpu = np.clip(cpu + rng.normal(0, 0.05, times.size) * cpu, 0, None).round(1)
    samples = tuple(
        PowerSample(int(t), {"cpu": float(c), "gpu": float(g)}) for t, c, g in zip(times, cpu, gpu)
    )
    return PowerTrace(traj.run_id, samples, spec.interval_ms, spec.baseline_cpu_mw)


def generate(spec: SynthSpec, seed: int) -> list[RunBundle]:
    n_succ = int(round(spec.n * spec.success_rate))
    outcomes = np.array([1] * n_succ + [0] * (spec.n - n_succ))
    outcomes = np.random.default_rng(derive_seed(seed, "outcomes")).permutation(outcomes)
    return [_run(spec, i, int(o), seed) for i, o in enumerate(outcomes)]


def synthesize_corpus(spec: SynthSpec, seed: int, out_dir: str | Path) -> list[RunBundle]:
    """Generate ``spec.n`` bundles and write them to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundles = generate(spec, seed)
    for b in bundles:
        write_bundle(b, out_dir)
    return bundles
