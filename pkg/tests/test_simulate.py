import math

import pytest

from conftest import simple_traj
from stopwatt.energy import EnergyLedger, StepEnergy
from stopwatt.features import FeatureConfig, build_matrix
from stopwatt.gbdt import HyperParams, fit
from stopwatt.simulate import (
    Policy,
    SimulationConfig,
    SimulationError,
    auto_thresholds,
    best_reduction,
    compare,
    curve_points,
    decide,
    dominance_fraction,
    random_replicates,
    simulate,
    sweep,
    write_curve_csv,
    write_decision_log,
)

GRID = [i / 100 for i in range(101)]


def ledger(run_id, per_step_mwh):
    return EnergyLedger(run_id, tuple(StepEnergy(i + 1, e) for i, e in enumerate(per_step_mwh)))


def abcd_corpus():
    # (run, outcome, full, partial at step 1)
    spec = [("A", 1, 10.0, 4.0), ("B", 0, 20.0, 8.0), ("C", 0, 30.0, 12.0), ("D", 1, 15.0, 5.0)]
    return [(simple_traj(2, o, rid), ledger(rid, [p, f - p])) for rid, o, f, p in spec]


# --------------------------------------------------------------------------- single decisions

def test_short_run_has_no_decision():
    t = simple_traj(3)
    assert decide(Policy.min_logprob(0.0), t, 5) == (False, False)


def test_classifier_tau_zero_never_stops():
    t = simple_traj(3)
    assert decide(Policy.classifier(0.0, scores={"r1": 1e-16}), t, 2) == (True, False)


def test_min_logprob_direct_comparison():
    t = simple_traj(2, logprobs=(-0.2, -1.7))
    assert decide(Policy.min_logprob(-1.0), t, 2) == (True, True)
    assert decide(Policy.mean_logprob(-1.0), t, 2) == (True, False)  # mean -0.95


def test_policy_validation():
    with pytest.raises(SimulationError):
        Policy("classifier", 0.5)
    with pytest.raises(SimulationError):
        Policy.random(1.5, seed=1)
    with pytest.raises(SimulationError):
        Policy("min_logprob", 0.0, seed=3)
    with pytest.raises(SimulationError):
        SimulationConfig(3, cutoff_step=2)


# --------------------------------------------------------------------------- corpus simulation

def test_abcd_as_runs():
    scores = {"A": 0.9, "B": 0.1, "C": 0.8, "D": 0.2}
    res = simulate(abcd_corpus(), Policy.classifier(0.5, scores=scores), SimulationConfig(1, None, 0.01))
    assert res.metrics.early_stop_wastage_mwh == pytest.approx(43.04, abs=1e-12)
    assert res.metrics.reduction_pct == pytest.approx(13.92, abs=1e-12)
    assert res.metrics.utility_drop_pct == 50.0
    assert res.recompute() == res.metrics


def test_never_and_always_stop():
    corpus = abcd_corpus()
    never = simulate(corpus, Policy.min_logprob(-math.inf), SimulationConfig(1, None, 0.0))
    assert (never.metrics.reduction_pct, never.metrics.utility_drop_pct) == (0.0, 0.0)
    failures = [c for c in corpus if c[0].outcome == 0]
    always = simulate(failures, Policy.min_logprob(math.inf), SimulationConfig(1))
    assert always.metrics.reduction_pct > 0
    assert math.isnan(always.metrics.utility_drop_pct) and always.metrics.notes


def test_baseline_policies_pay_no_classifier_cost():
    res = simulate(abcd_corpus(), Policy.min_logprob(-math.inf), SimulationConfig(1, None, 5.0))
    assert res.metrics.reduction_pct == 0.0


def test_cutoff_truncates_full_energy():
    corpus = [(simple_traj(4, 0, "x"), ledger("x", [1.0, 2.0, 3.0, 4.0])),
              (simple_traj(2, 1, "y"), ledger("y", [5.0, 6.0]))]
    res = simulate(corpus, Policy.min_logprob(-math.inf), SimulationConfig(1, cutoff_step=2))
    assert res.metrics.wastage_mwh == 3.0
    stop = simulate(corpus, Policy.min_logprob(math.inf), SimulationConfig(1, cutoff_step=2))
    assert stop.metrics.early_stop_wastage_mwh == pytest.approx(1.0 + 5.0)


def test_random_policy_reproducible_and_bounded():
    corpus = abcd_corpus()
    cfg = SimulationConfig(1)
    a = simulate(corpus, Policy.random(0.5, seed=3), cfg)
    b = simulate(corpus, Policy.random(0.5, seed=3), cfg)
    assert [d.stopped for d in a.decisions] == [d.stopped for d in b.decisions]
    assert not any(d.stopped for d in simulate(corpus, Policy.random(0.0, seed=3), cfg).decisions)
    assert all(d.stopped for d in simulate(corpus, Policy.random(1.0, seed=3), cfg).decisions)


def test_model_policy_matches_precomputed_scores():
    runs = [simple_traj(3, i % 2, f"r{i}", logprobs=(-0.1 - (i % 2), -1.0 - i / 10)) for i in range(12)]
    corpus = [(t, ledger(t.run_id, [1.0, 2.0, 3.0])) for t in runs]
    fc = FeatureConfig(k=2, step=2)
    m = build_matrix(runs, fc)
    model = fit(m, params=HyperParams(rounds=5, min_child_weight=0.0))
    scores = dict(zip(m.run_ids, model.predict_proba(m.X)))
    cfg = SimulationConfig(2)
    by_model = simulate(corpus, Policy.classifier(0.5, model=model, feature_config=fc), cfg)
    by_scores = simulate(corpus, Policy.classifier(0.5, scores=scores), cfg)
    assert by_model.metrics == by_scores.metrics


# --------------------------------------------------------------------------- sweeps

def _oof_family(planted_cv):
    return Policy.classifier(0.0, scores=planted_cv[1].score_map())


def test_sweep_endpoints(planted_corpus, planted_cv):
    s, cost = 3, 0.01
    cfg = SimulationConfig(s, None, cost)
    lo, hi = sweep(planted_corpus, _oof_family(planted_cv), cfg, [0.0, 1.0 + 1e-9])
    eligible = [(t, l) for t, l in planted_corpus if t.n_steps >= s]
    n = len(eligible)
    baseline = math.fsum(l.total_mwh for t, l in planted_corpus if t.outcome == 0)
    assert lo.metrics.utility_drop_pct == 0.0
    assert lo.metrics.reduction_pct == pytest.approx(-100 * n * cost / baseline, rel=1e-12)
    partial = math.fsum(l.energy_through(s) if t.n_steps >= s else l.total_mwh * (t.outcome == 0)
                        for t, l in planted_corpus)
    assert hi.metrics.utility_drop_pct == pytest.approx(
        100 * sum(t.outcome for t, _ in eligible) / sum(t.outcome for t, _ in planted_corpus))
    assert hi.metrics.reduction_pct == pytest.approx((1 - (partial + cost * n) / baseline) * 100, rel=1e-12)


def test_drop_monotone_in_tau(planted_corpus, planted_cv):
    res = sweep(planted_corpus, _oof_family(planted_cv), SimulationConfig(3), GRID)
    drops = [r.metrics.utility_drop_pct for r in res]
    assert drops == sorted(drops)
    with pytest.raises(SimulationError):
        sweep(planted_corpus, _oof_family(planted_cv), SimulationConfig(3), [0.5, 0.1])


def test_planted_sweep_and_dominance(planted_corpus, planted_cv):
    cfg = SimulationConfig(3)
    clf = sweep(planted_corpus, _oof_family(planted_cv), cfg, GRID)
    assert best_reduction(clf, 5.0) >= 15.0
    for fam in (Policy.min_logprob(0.0), Policy.mean_logprob(0.0)):
        base = sweep(planted_corpus, fam, cfg, auto_thresholds(planted_corpus, fam, 3))
        assert dominance_fraction(curve_points(clf), curve_points(base)) >= 0.7


def test_null_classifier_within_chance_band(null_corpus, null_cv):
    cfg = SimulationConfig(3)
    clf = sweep(null_corpus, Policy.classifier(0.0, scores=null_cv[1].score_map()), cfg, GRID)
    reps = random_replicates(null_corpus, cfg, GRID, seed=5, n=100)
    assert 0.35 <= dominance_fraction(curve_points(clf), reps) <= 0.65


def test_compare_table_size(planted_corpus, planted_cv):
    fams = [(_oof_family(planted_cv), GRID[:11]), (Policy.min_logprob(0.0), [-3.0, -2.0, -1.0])]
    table = compare(planted_corpus, fams, SimulationConfig(3))
    assert len(table) == 11 + 3
    assert ("min_logprob", -2.0) in table


def test_auto_thresholds_cover_every_stopping_set():
    corpus = [(simple_traj(1, i % 2, f"r{i}", logprobs=(-0.1, lp)), ledger(f"r{i}", [1.0]))
              for i, lp in enumerate([-3.0, -2.0, -1.0, -2.0])]
    fam = Policy.min_logprob(0.0)
    th = auto_thresholds(corpus, fam, 1)
    assert th[:3] == [-3.0, -2.0, -1.0] and len(th) == 4 and th[3] > -1.0
    stops = [sum(d.stopped for d in r.decisions) for r in sweep(corpus, fam, SimulationConfig(1), th)]
    assert stops == [0, 1, 3, 4]


def test_dominance_hand_case():
    mine = [(0.0, 0.0), (10.0, 20.0)]
    other = [(0.0, 0.0), (10.0, 10.0)]
    # level 0 ties (0.5), level 10 wins (1)
    assert dominance_fraction(mine, other) == 0.75
    assert dominance_fraction(other, mine) == 0.25
    assert math.isnan(dominance_fraction([], other))


def test_exports(tmp_path):
    corpus = abcd_corpus()
    res = sweep(corpus, Policy.min_logprob(0.0), SimulationConfig(1), [-1.0, 0.0])
    write_curve_csv(tmp_path / "c.csv", res, "# f\n")
    write_decision_log(tmp_path / "d.csv", res, "# f\n")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 1 + 2 + 1
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 1 + 2 * 4 + 1
