"""Trace-driven replay of early-stop policies at a fixed decision step.

Nothing is re-executed: a run stopped at step ``s`` is charged the recorded
energy of steps ``1..s``, and a run left alone is charged its full recording.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .energy import Decision, EnergyLedger, MetricBundle, metrics
from .features import FeatureConfig, build_vector
from .gbdt import BoostedModel
from .seeding import derive_seed
from .trace_model import Trajectory

KINDS = ("classifier", "random", "min_logprob", "mean_logprob")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Policy:
    """Stop a run at the decision step when its confidence is below ``threshold``.

    ``threshold`` is tau for ``classifier``, theta for the logprob baselines and
    the stop probability for ``random``.
    """

    kind: str
    threshold: float
    model: BoostedModel | None = None
    scores: Mapping[str, float] | None = None
    feature_config: FeatureConfig | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SimulationError(f"unknown policy kind {self.kind!r}")
        has_clf = self.model is not None or self.scores is not None
        if self.kind == "classifier":
            if (self.model is None) == (self.scores is None):
                raise SimulationError("classifier policy needs exactly one of model or scores")
        elif has_clf or self.feature_config is not None:
            raise SimulationError(f"{self.kind} policy takes no classifier parameters")
        if self.kind == "random":
            if self.seed is None:
                raise SimulationError("random policy needs a seed")
            if not 0.0 <= self.threshold <= 1.0:
                raise SimulationError("stop probability must lie in [0, 1]")
        elif self.seed is not None:
            raise SimulationError(f"{self.kind} policy takes no seed")

    @classmethod
    def classifier(cls, tau: float, model: BoostedModel | None = None, scores: Mapping[str, float] | None = None,
                   feature_config: FeatureConfig | None = None) -> "Policy":
        return cls("classifier", tau, model=model, scores=scores, feature_config=feature_config)

    @classmethod
    def random(cls, p_stop: float, seed: int) -> "Policy":
        return cls("random", p_stop, seed=seed)

    @classmethod
    def min_logprob(cls, theta: float) -> "Policy":
        return cls("min_logprob", theta)

    @classmethod
    def mean_logprob(cls, theta: float) -> "Policy":
        return cls("mean_logprob", theta)

    def at(self, threshold: float) -> "Policy":
        return replace(self, threshold=float(threshold))

    def describe(self) -> str:
        return f"{self.kind}@{self.threshold!r}"


@dataclass(frozen=True)
class SimulationConfig:
    decision_step: int
    cutoff_step: int | None = None
    classifier_cost_mwh: float = 0.01

    def __post_init__(self):
        if self.decision_step < 1:
            raise SimulationError("decision_step must be >= 1")
        if self.cutoff_step is not None and self.cutoff_step < self.decision_step:
            raise SimulationError("cutoff_step must be >= decision_step")


@dataclass
class SimulationResult:
    policy: str
    kind: str
    threshold: float
    metrics: MetricBundle
    decisions: list[Decision] = field(default_factory=list)
    classifier_cost_mwh: float = 0.0

    def recompute(self) -> MetricBundle:
        return metrics(self.decisions, self.classifier_cost_mwh)


def confidence(policy: Policy, traj: Trajectory, s: int) -> float:
    """Score compared against the policy threshold; only steps ``1..s`` are read."""
    if policy.kind == "classifier":
        if policy.scores is not None:
            try:
                return float(policy.scores[traj.run_id])
            except KeyError as exc:
                raise SimulationError(f"no classifier score for run {traj.run_id}") from exc
        cfg = policy.feature_config or FeatureConfig()
        vec = build_vector(traj, FeatureConfig(cfg.k, cfg.max_lcs_tokens, s))
        return float(policy.model.predict_proba(vec.values[None, :])[0])
    if policy.kind == "random":
        return float(np.random.default_rng(derive_seed(policy.seed, "random-policy", traj.run_id)).random())
    lps = traj.steps[s - 1].logprobs
    if not lps:
        return 0.0  # an empty step gives no evidence of low confidence
    if policy.kind == "min_logprob":
        return float(min(lps))
    return math.fsum(lps) / len(lps)


def decide(policy: Policy, traj: Trajectory, s: int, ledger: EnergyLedger | None = None) -> tuple[bool, bool]:
    """``(had_decision, stopped)`` for one run at decision step ``s``."""
    if ledger is not None and (ledger.run_id != traj.run_id or len(ledger.per_step) != traj.n_steps):
        raise SimulationError(f"ledger does not match trajectory {traj.run_id}")
    if traj.n_steps < s:
        return False, False
    return True, confidence(policy, traj, s) < policy.threshold


def _energies(corpus, config: SimulationConfig):
    out = []
    for traj, ledger in corpus:
        if ledger.run_id != traj.run_id:
            raise SimulationError(f"ledger {ledger.run_id} paired with trajectory {traj.run_id}")
        full_ledger = ledger.truncated(config.cutoff_step)
        full = full_ledger.total_mwh
        had = traj.n_steps >= config.decision_step
        partial = full_ledger.energy_through(config.decision_step) if had else full
        out.append((traj, had, full, partial))
    return out


def _result(policy: Policy, rows, conf, config: SimulationConfig) -> SimulationResult:
    cost = config.classifier_cost_mwh if policy.kind == "classifier" else 0.0
    decisions = [
        Decision(full, partial, traj.outcome, bool(had and c < policy.threshold), had, traj.run_id)
        for (traj, had, full, partial), c in zip(rows, conf)
    ]
    return SimulationResult(policy.describe(), policy.kind, policy.threshold, metrics(decisions, cost),
                            decisions, cost)


def _confidences(policy: Policy, rows, s: int) -> list[float]:
    return [confidence(policy, traj, s) if had else math.nan for traj, had, _, _ in rows]


def simulate(corpus: Sequence[tuple[Trajectory, EnergyLedger]], policy: Policy,
             config: SimulationConfig) -> SimulationResult:
    rows = _energies(corpus, config)
    return _result(policy, rows, _confidences(policy, rows, config.decision_step), config)


def sweep(corpus: Sequence[tuple[Trajectory, EnergyLedger]], family: Policy, config: SimulationConfig,
          thresholds: Sequence[float]) -> list[SimulationResult]:
    """One result per threshold; confidences are computed once per run."""
    thresholds = [float(t) for t in thresholds]
    if thresholds != sorted(thresholds):
        raise SimulationError("thresholds must be sorted")
    rows = _energies(corpus, config)
    conf = _confidences(family, rows, config.decision_step)
    return [_result(family.at(t), rows, conf, config) for t in thresholds]


def auto_thresholds(corpus: Sequence[tuple[Trajectory, EnergyLedger]], family: Policy, s: int) -> list[float]:
    """Every distinct observed confidence plus one value above the maximum.

    With this grid each distinct stopping set of a threshold rule is visited once.
    """
    rows = [(t, t.n_steps >= s, 0.0, 0.0) for t, _ in corpus]
    vals = sorted({c for c in _confidences(family, rows, s) if not math.isnan(c)})
    if not vals:
        return [0.0]
    top = vals[-1] + max(1e-9, abs(vals[-1]) * 1e-9)
    return [*vals, top]


def compare(corpus, families: Sequence[tuple[Policy, Sequence[float]]],
            config: SimulationConfig) -> dict[tuple[str, float], tuple[float, float]]:
    """Table keyed ``(kind, threshold)`` -> ``(reduction_pct, drop_pct)``."""
    table: dict[tuple[str, float], tuple[float, float]] = {}
    for family, thresholds in families:
        for r in sweep(corpus, family, config, thresholds):
            table[(r.kind, r.threshold)] = (r.metrics.reduction_pct, r.metrics.utility_drop_pct)
    return table


def curve_points(results: Sequence[SimulationResult]) -> list[tuple[float, float]]:
    """``(drop_pct, reduction_pct)`` pairs with defined values."""
    pts = []
    for r in results:
        d, red = r.metrics.utility_drop_pct, r.metrics.reduction_pct
        if not (math.isnan(d) or math.isnan(red)):
            pts.append((d, red))
    return pts


def _envelope(points, levels) -> np.ndarray:
    """Best reduction reachable without exceeding each drop level (-inf if none)."""
    pts = sorted(points)
    drops = np.array([d for d, _ in pts])
    best = np.maximum.accumulate(np.array([r for _, r in pts]))
    pos = np.searchsorted(drops, np.asarray(levels, dtype=float) + 1e-12, side="right")
    return np.where(pos > 0, best[np.maximum(pos - 1, 0)], -np.inf)


def dominance_fraction(curve: Sequence[tuple[float, float]], other, band: float = 0.95) -> float:
    """Share of matched utility-drop levels where ``curve`` saves more energy.

    ``other`` is one curve or a list of replicate curves (e.g. the random
    policy under many seeds). At every drop level reached by either side, up to
    the smaller maximum drop, the best reduction reachable without exceeding
    that level is compared. Against replicates, ``curve`` wins only above the
    upper edge of the central ``band`` of replicate envelopes and loses only
    below its lower edge; anything in between, like an exact tie, counts one
    half.
    """
    reps = [other] if other and isinstance(other[0], tuple) else list(other)
    if not curve or not reps or any(not r for r in reps):
        return math.nan
    top = min(max(d for d, _ in curve), *(max(d for d, _ in r) for r in reps))
    levels = sorted({d for c in (curve, *reps) for d, _ in c if d <= top})
    mine = _envelope(curve, levels)
    env = np.vstack([_envelope(r, levels) for r in reps])
    if len(reps) == 1:
        lo = hi = env[0]
    else:
        q = (1.0 - band) / 2.0
        lo, hi = np.quantile(env, q, axis=0), np.quantile(env, 1.0 - q, axis=0)
    score = np.where(mine > hi, 1.0, np.where(mine < lo, 0.0, 0.5))
    return float(score.mean())


def random_replicates(corpus, config: SimulationConfig, thresholds: Sequence[float], seed: int,
                      n: int = 100) -> list[list[tuple[float, float]]]:
    """Random-policy curves under ``n`` derived seeds, for chance bands."""
    return [curve_points(sweep(corpus, Policy.random(0.0, derive_seed(seed, "replicate", r)), config, thresholds))
            for r in range(n)]


def best_reduction(results: Sequence[SimulationResult], max_drop: float) -> float:
    """Largest reduction among results whose utility drop is at most ``max_drop``."""
    pts = curve_points(results)
    return float(_envelope(pts, [max_drop])[0]) if pts else -math.inf


# --------------------------------------------------------------------------- export

CURVE_HEADER = ["policy", "threshold", "reduction_pct", "drop_pct", "stopped_failures", "stopped_successes"]
LOG_HEADER = ["policy", "threshold", "run_id", "had_decision", "stopped", "partial_mwh", "full_mwh", "outcome"]


def _num(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_curve_csv(path, results: Sequence[SimulationResult], footer: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in results:
            m = r.metrics
            w.writerow([r.kind, repr(r.threshold), _num(m.reduction_pct), _num(m.utility_drop_pct),
                        m.stopped_failures, m.stopped_successes])
        if footer:
            fh.write(footer)


def write_decision_log(path, results: Sequence[SimulationResult], footer: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in results:
            for d in r.decisions:
                w.writerow([r.kind, repr(r.threshold), d.run_id, int(d.had_decision), int(d.stopped),
                            repr(d.partial_mwh), repr(d.full_mwh), d.outcome])
        if footer:
            fh.write(footer)


def plot_curves(path, curves: Mapping[str, Sequence[SimulationResult]], title: str = "") -> None:
    """Reduction vs utility drop, one polyline per policy, as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "stopwatt"
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, results in curves.items():
        pts = sorted(curve_points(results))
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=name)
    ax.set_xlabel("Task utility drop (%)")
    ax.set_ylabel("Energy wastage reduction (%)")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
