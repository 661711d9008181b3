"""Power integration, per-step energy ledgers and early-stop wastage metrics.

Units are mWh for energy, mW for power and integer milliseconds for time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .trace_model import RunBundle, Trajectory

MW_MS_PER_MWH = 3_600_000.0
DEFAULT_GAP_CAP_MS = 1000
DEFAULT_CLASSIFIER_COST_MWH = 0.01

INFERENCE, TOOL, OTHER = "inference", "tool", "other"


class EnergyError(ValueError):
    pass


def integrate_power(t_ms: Sequence[float], mw: Sequence[float], t0: float, t1: float,
                    gap_cap_ms: float = DEFAULT_GAP_CAP_MS, edge_slack_ms: float = 0.0) -> float:
    """Trapezoidal energy (mWh) of a sampled power signal over ``[t0, t1]``.

    Power is the linear interpolant of the samples. Inside an inter-sample gap
    longer than ``gap_cap_ms`` only the first ``gap_cap_ms`` of the gap is
    counted. Before the first / after the last sample the edge reading is held.
    A window lying entirely outside the samples is an error unless it sits
    within ``edge_slack_ms`` of them.
    """
    t = np.asarray(t_ms, dtype=float)
    p = np.asarray(mw, dtype=float)
    if t.size == 0:
        raise EnergyError("no power samples")
    if t1 < t0:
        raise EnergyError(f"malformed window [{t0}, {t1}]")
    if t1 < t[0] - edge_slack_ms or t0 > t[-1] + edge_slack_ms or (
        edge_slack_ms == 0 and (t1 < t[0] or t0 > t[-1])
    ):
        raise EnergyError(f"window [{t0}, {t1}] ms lies outside samples [{t[0]:g}, {t[-1]:g}] ms")
    if t1 == t0:
        return 0.0

    parts = []
    # held edges
    if t0 < t[0]:
        parts.append((min(t1, t[0]) - t0) * p[0])
    if t1 > t[-1]:
        parts.append((t1 - max(t0, t[-1])) * p[-1])

    if t.size > 1:
        lo = max(int(np.searchsorted(t, t0, side="right")) - 1, 0)
        hi = min(int(np.searchsorted(t, t1, side="left")), t.size - 1)
        if hi > lo:
            ta, tb = t[lo:hi], t[lo + 1:hi + 1]
            pa, pb = p[lo:hi], p[lo + 1:hi + 1]
            slope = (pb - pa) / (tb - ta)
            live_end = np.minimum(tb, ta + gap_cap_ms)
            a = np.maximum(ta, t0)
            b = np.minimum(live_end, t1)
            keep = b > a
            a, b = a[keep], b[keep]
            ta, pa, slope = ta[keep], pa[keep], slope[keep]
            fa = pa + slope * (a - ta)
            fb = pa + slope * (b - ta)
            parts.extend(((b - a) * (fa + fb) * 0.5).tolist())
    return math.fsum(parts) / MW_MS_PER_MWH


@dataclass(frozen=True)
class PhaseWindow:
    step_index: int
    phase: str
    t0_ms: int
    t1_ms: int

    @property
    def duration_ms(self) -> int:
        return self.t1_ms - self.t0_ms


def derive_phases(traj: Trajectory) -> list[PhaseWindow]:
    """Tile the run span into inference / tool / other windows.

    Idle time between two steps is charged as "other" to the later step, so a
    step's energy ends with its last event.
    """
    windows: list[PhaseWindow] = []
    prev_end = None
    for step in traj.steps:
        i = step.index
        if prev_end is not None and step.inference_started_ms > prev_end:
            windows.append(PhaseWindow(i, OTHER, prev_end, step.inference_started_ms))
        windows.append(PhaseWindow(i, INFERENCE, step.inference_started_ms, step.inference_ended_ms))
        cursor = step.inference_ended_ms
        for call in step.tool_calls:
            if call.started_ms > cursor:
                windows.append(PhaseWindow(i, OTHER, cursor, call.started_ms))
            windows.append(PhaseWindow(i, TOOL, call.started_ms, call.ended_ms))
            cursor = call.ended_ms
        prev_end = cursor
    return windows


@dataclass(frozen=True)
class StepEnergy:
    step_index: int
    inference_mwh: float = 0.0
    tool_mwh: float = 0.0
    other_mwh: float = 0.0

    @property
    def total_mwh(self) -> float:
        return math.fsum((self.inference_mwh, self.tool_mwh, self.other_mwh))


@dataclass(frozen=True)
class EnergyLedger:
    run_id: str
    per_step: tuple[StepEnergy, ...]
    classifier_cost_mwh: float = DEFAULT_CLASSIFIER_COST_MWH

    @property
    def total_mwh(self) -> float:
        return self.energy_through(len(self.per_step))

    def energy_through(self, step: int) -> float:
        """Energy of steps ``1..step`` (all phases of those steps)."""
        return math.fsum(
            v for e in self.per_step[:max(step, 0)] for v in (e.inference_mwh, e.tool_mwh, e.other_mwh)
        )

    def truncated(self, cutoff_step: int | None) -> "EnergyLedger":
        if cutoff_step is None or cutoff_step >= len(self.per_step):
            return self
        return EnergyLedger(self.run_id, self.per_step[:cutoff_step], self.classifier_cost_mwh)


@dataclass(frozen=True)
class LedgerConfig:
    gap_cap_ms: int = DEFAULT_GAP_CAP_MS
    coverage_slack_ms: int = 1000
    gpu_components: tuple[str, ...] = ("gpu",)
    cpu_components: tuple[str, ...] = ("cpu",)
    classifier_cost_mwh: float = DEFAULT_CLASSIFIER_COST_MWH


def build_ledger(bundle: RunBundle, config: LedgerConfig | None = None) -> EnergyLedger:
    """Attribute component energy to steps and phases.

    GPU components are charged in full. CPU energy in tool and other windows
    has the idle baseline (``baseline_cpu_mw`` times window length) removed,
    clamped at zero per window.
    """
    config = config or LedgerConfig()
    traj = bundle.trajectory
    series = {}
    for comp in (*config.gpu_components, *config.cpu_components):
        if comp not in series:
            t, mw = bundle.power.series(comp)
            series[comp] = (np.asarray(t, dtype=float), np.asarray(mw, dtype=float))

    sums: dict[int, dict[str, list[float]]] = {
        s.index: {INFERENCE: [], TOOL: [], OTHER: []} for s in traj.steps
    }

    def window_energy(comp: str, w: PhaseWindow) -> float:
        return integrate_power(*series[comp], w.t0_ms, w.t1_ms, config.gap_cap_ms, config.coverage_slack_ms)

    for w in derive_phases(traj):
        gpu = [window_energy(c, w) for c in config.gpu_components]
        cpu = math.fsum(window_energy(c, w) for c in config.cpu_components)
        if w.phase != INFERENCE and config.cpu_components:
            cpu = max(cpu - bundle.baseline_cpu_mw * w.duration_ms / MW_MS_PER_MWH, 0.0)
        sums[w.step_index][w.phase].append(math.fsum(gpu) + cpu)

    per_step = tuple(
        StepEnergy(i, math.fsum(d[INFERENCE]), math.fsum(d[TOOL]), math.fsum(d[OTHER]))
        for i, d in sums.items()
    )
    return EnergyLedger(traj.run_id, per_step, config.classifier_cost_mwh)


def ledger_rows(ledger: EnergyLedger) -> list[list]:
    """CSV rows (run_id, step_index, inference, tool, other) plus a TOTAL row."""
    rows = [[ledger.run_id, e.step_index, e.inference_mwh, e.tool_mwh, e.other_mwh] for e in ledger.per_step]
    rows.append([
        ledger.run_id,
        "TOTAL",
        math.fsum(e.inference_mwh for e in ledger.per_step),
        math.fsum(e.tool_mwh for e in ledger.per_step),
        math.fsum(e.other_mwh for e in ledger.per_step),
    ])
    return rows


# --------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Decision:
    """One run's fate at the decision step."""

    full_mwh: float
    partial_mwh: float
    outcome: int
    stopped: bool = False
    had_decision: bool = True
    run_id: str = ""


def energy_wastage(runs: Iterable[tuple[float, int]]) -> float:
    """Total full-run energy of failed runs; ``runs`` holds (mWh, outcome) pairs."""
    return math.fsum(mwh for mwh, outcome in runs if outcome == 0)


def _check(d: Decision) -> None:
    if d.partial_mwh > d.full_mwh:
        raise EnergyError(f"partial energy {d.partial_mwh} exceeds full energy {d.full_mwh} ({d.run_id})")
    if d.stopped and not d.had_decision:
        raise EnergyError(f"run {d.run_id!r} stopped without a decision")


def early_stop_wastage(decisions: Sequence[Decision], classifier_cost_mwh: float) -> float:
    terms = []
    for d in decisions:
        _check(d)
        if d.outcome == 0:
            terms.append(d.partial_mwh if d.stopped else d.full_mwh)
        elif d.stopped:
            terms.append(d.partial_mwh)
        if d.had_decision:
            terms.append(classifier_cost_mwh)
    return math.fsum(terms)


@dataclass(frozen=True)
class MetricBundle:
    wastage_mwh: float
    early_stop_wastage_mwh: float
    reduction_pct: float
    utility_drop_pct: float
    stopped_failures: int
    stopped_successes: int
    continued_failures: int
    continued_successes: int
    notes: tuple[str, ...] = field(default=())


def metrics(decisions: Sequence[Decision], classifier_cost_mwh: float) -> MetricBundle:
    """Wastage, early-stop wastage, reduction % and utility drop %.

    Undefined ratios (no failed runs, or no successes) come back as NaN with a
    note explaining why.
    """
    decisions = list(decisions)
    baseline = energy_wastage((d.full_mwh, d.outcome) for d in decisions)
    es = early_stop_wastage(decisions, classifier_cost_mwh)
    n_fail = sum(1 for d in decisions if d.outcome == 0)
    n_succ = len(decisions) - n_fail
    sf = sum(1 for d in decisions if d.outcome == 0 and d.stopped)
    ss = sum(1 for d in decisions if d.outcome == 1 and d.stopped and d.had_decision)
    notes = []
    if n_fail == 0 or baseline == 0.0:
        reduction = math.nan
        notes.append("reduction undefined: no energy spent on failed runs")
    else:
        reduction = (1.0 - es / baseline) * 100.0
    if n_succ == 0:
        drop = math.nan
        notes.append("utility drop undefined: no successful runs")
    else:
        drop = ss / n_succ * 100.0
    return MetricBundle(baseline, es, reduction, drop, sf, ss, n_fail - sf, n_succ - ss, tuple(notes))
