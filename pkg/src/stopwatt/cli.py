"""``stopwatt`` command line: validate, energy, featurize, train, sweep, importance, decide, synth.

Exit codes: 0 success, 1 data or model failure, 2 configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable


from . import __version__
from .config import ConfigError, footer, load_config, parse_value
from .energy import EnergyError, LedgerConfig, build_ledger, ledger_rows
from .features import FeatureConfig, FeatureError, build_matrix, build_vector
from .gbdt import BoostedModel, GBDTError, feature_importance
from .model_selection import HalvingConfig, SelectionError, nested_cv, train_final
from .seeding import derive_seed
from .simulate import (
    Policy,
    SimulationConfig,
    SimulationError,
    auto_thresholds,
    best_reduction,
    curve_points,
    dominance_fraction,
    plot_curves,
    random_replicates,
    sweep,
    write_curve_csv,
    write_decision_log,
)
from .synth import SynthSpec, synthesize_corpus
from .trace_model import IngestConfig, TraceError, load_corpus, load_trajectory, validate_corpus

log = logging.getLogger("stopwatt")

DATA_ERRORS = (TraceError, EnergyError, FeatureError, GBDTError, SelectionError, SimulationError)


class Context:
    """Resolved config plus the few derived objects every command needs."""

    def __init__(self, cfg: dict[str, Any], needs_corpus: bool = True):
        if cfg["seed"] is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
            raise ConfigError("seed must be an integer")
        if needs_corpus:
            if cfg["corpus_dir"] is None:
                raise ConfigError("corpus_dir is not set")
            if not Path(cfg["corpus_dir"]).is_dir():
                raise ConfigError(f"corpus directory not found: {cfg['corpus_dir']}")
        self.cfg = cfg
        self.seed: int = cfg["seed"]
        self.out = Path(cfg["output_dir"])
        self.footer = footer(cfg)
        ing = cfg["ingest"]
        self.ingest = IngestConfig(coverage_slack_ms=ing["coverage_slack_ms"],
                                   baseline_cpu_mw=ing["baseline_cpu_mw"])
        en = cfg["energy"]
        self.ledger = LedgerConfig(gap_cap_ms=en["gap_cap_ms"], coverage_slack_ms=ing["coverage_slack_ms"],
                                   gpu_components=tuple(en["gpu_components"]),
                                   cpu_components=tuple(en["cpu_components"]),
                                   classifier_cost_mwh=en["classifier_cost_mwh"])
        sel = cfg["selection"]
        self.halving = HalvingConfig(sel["n_candidates"], sel["min_rounds"], sel["factor"], sel["max_rounds"])
        self.jobs = int(cfg["jobs"])

    def feature_config(self, step: int) -> FeatureConfig:
        f = self.cfg["feature"]
        return FeatureConfig(k=f["k"], max_lcs_tokens=f["max_lcs_tokens"], step=step)

    def corpus(self):
        return load_corpus(self.cfg["corpus_dir"], self.ingest)

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name


def _write_rows(path: Path, header: list[str], rows, foot: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        fh.write(foot)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


# --------------------------------------------------------------------------- commands

def cmd_validate(ctx: Context, args) -> int:
    report = validate_corpus(ctx.cfg["corpus_dir"], ctx.ingest)
    rows = [[name, "ok" if err is None else "error", "" if err is None else err]
            for name, err in sorted(report.entries.items())]
    _write_rows(ctx.path("validation_report.csv"), ["file", "status", "error"], rows, ctx.footer)
    for name, err in sorted(report.entries.items()):
        if err is not None:
            print(f"FAIL {name}: {err}")
    print(f"{report.ok} ok, {report.failed} failed")
    return 1 if report.failed else 0


def cmd_energy(ctx: Context, args) -> int:
    bundles = ctx.corpus()
    ledgers_dir = ctx.path("ledgers")
    ledgers_dir.mkdir(exist_ok=True)
    totals: dict[int, list[float]] = {0: [], 1: []}
    for b in bundles:
        ledger = build_ledger(b, ctx.ledger)
        _write_rows(ledgers_dir / f"{b.run_id}.csv",
                    ["run_id", "step", "inference_mwh", "tool_mwh", "other_mwh"],
                    ledger_rows(ledger), ctx.footer)
        totals[b.trajectory.outcome].append(ledger.total_mwh)
    rows = []
    for label, vals in (("success", totals[1]), ("failure", totals[0]), ("all", totals[0] + totals[1])):
        mean = math.fsum(vals) / len(vals) if vals else math.nan
        rows.append([label, len(vals), _fmt(mean)])
    _write_rows(ctx.path("energy_summary.csv"), ["class", "runs", "mean_full_mwh"], rows, ctx.footer)
    for r in rows:
        print(f"{r[0]:8s} runs={r[1]:4d} mean_mwh={r[2]}")
    return 0


def _step(args, ctx: Context) -> int:
    if args.step is not None:
        return args.step
    steps = ctx.cfg["simulate"]["decision_steps"]
    if len(steps) != 1:
        raise ConfigError("--step is required when simulate.decision_steps has more than one entry")
    return int(steps[0])


def cmd_featurize(ctx: Context, args) -> int:
    s = _step(args, ctx)
    matrix = build_matrix([b.trajectory for b in ctx.corpus()], ctx.feature_config(s))
    matrix.write_csv(ctx.path(f"features_s{s}.csv"), ctx.footer)
    print(f"step {s}: {len(matrix)} eligible runs, {len(matrix.ineligible)} ineligible, "
          f"{matrix.X.shape[1]} features")
    return 0


def cmd_train(ctx: Context, args) -> int:
    s = _step(args, ctx)
    sel = ctx.cfg["selection"]
    matrix = build_matrix([b.trajectory for b in ctx.corpus()], ctx.feature_config(s))
    report, _ = nested_cv(matrix, sel["outer_k"], sel["inner_k"], derive_seed(ctx.seed, "cv", s),
                          config=ctx.halving, n_jobs=ctx.jobs)
    report.write_csv(ctx.path(f"cv_report_s{s}.csv"), ctx.footer)
    report.write_oof_csv(ctx.path(f"oof_scores_s{s}.csv"), ctx.footer)
    model, search = train_final(matrix, derive_seed(ctx.seed, "final", s), sel["inner_k"], config=ctx.halving)
    model.metadata.update({
        "step": s,
        "k": matrix.config.k,
        "max_lcs_tokens": matrix.config.max_lcs_tokens,
        "cv_mean_auc": report.mean_auc,
        "cv_ci95_halfwidth": report.ci95_halfwidth,
        "train_runs": len(matrix),
        "toolkit": f"stopwatt {__version__}",
        "config_hash": ctx.footer.split("config_hash=")[1].strip(),
    })
    model.save(ctx.path(f"model_s{s}.json"))
    print(f"step {s}: mean AUC {report.mean_auc:.4f} +/- {report.ci95_halfwidth:.4f} "
          f"over {len(report.folds)} folds; model_s{s}.json written")
    return 0


def _thresholds(spec, corpus, family: Policy, s: int, grid_size: int) -> list[float]:
    if spec == "auto":
        return auto_thresholds(corpus, family, s)
    if spec == "grid":
        return [i / (grid_size - 1) for i in range(grid_size)]
    if isinstance(spec, list) and all(isinstance(v, (int, float)) for v in spec):
        return sorted(float(v) for v in spec)
    raise ConfigError(f"thresholds must be 'auto', 'grid' or a list of numbers, got {spec!r}")


def _sweep_step(ctx: Context, corpus, s: int) -> list[list]:
    sim = ctx.cfg["simulate"]
    sel = ctx.cfg["selection"]
    thr = sim["thresholds"]
    matrix = build_matrix([t for t, _ in corpus], ctx.feature_config(s))
    # out-of-fold scores only: every run is scored by a model that never saw it
    report, _ = nested_cv(matrix, sel["outer_k"], sel["inner_k"], derive_seed(ctx.seed, "cv", s),
                          config=ctx.halving, n_jobs=ctx.jobs)
    report.write_oof_csv(ctx.path(f"oof_scores_s{s}.csv"), ctx.footer)
    config = SimulationConfig(s, sim["cutoff_step"], ctx.ledger.classifier_cost_mwh)
    families = {
        "classifier": Policy.classifier(0.0, scores=report.score_map()),
        "random": Policy.random(0.0, derive_seed(ctx.seed, "random", s)),
        "min_logprob": Policy.min_logprob(0.0),
        "mean_logprob": Policy.mean_logprob(0.0),
    }
    results = {}
    for kind, family in families.items():
        results[kind] = sweep(corpus, family, config, _thresholds(thr[kind], corpus, family, s, sim["grid_size"]))
    all_results = [r for rs in results.values() for r in rs]
    write_curve_csv(ctx.path(f"curve_s{s}.csv"), all_results, ctx.footer)
    write_decision_log(ctx.path(f"decisions_s{s}.csv"), all_results, ctx.footer)
    if sim["plot"]:
        plot_curves(ctx.path(f"curve_s{s}.svg"), results, title=f"decision step {s}")

    reps = random_replicates(corpus, config, _thresholds(thr["random"], corpus, families["random"], s,
                                                          sim["grid_size"]),
                             derive_seed(ctx.seed, "replicates", s), sim["random_replicates"])
    clf = curve_points(results["classifier"])
    rows = []
    for kind, rs in results.items():
        pts = curve_points(rs)
        vs_random = dominance_fraction(pts, reps) if kind != "random" else math.nan
        vs_clf = dominance_fraction(clf, pts) if kind != "classifier" else math.nan
        rows.append([s, kind, len(rs), _fmt(report.mean_auc) if kind == "classifier" else "",
                     _fmt(best_reduction(rs, 5.0)), _fmt(vs_random), _fmt(vs_clf)])
    print(f"step {s}: AUC {report.mean_auc:.4f}, best reduction at drop<=5%: "
          + ", ".join(f"{r[1]}={float(r[4]):.2f}" for r in rows))
    return rows


def cmd_sweep(ctx: Context, args) -> int:
    sim = ctx.cfg["simulate"]
    steps = [args.step] if args.step is not None else [int(s) for s in sim["decision_steps"]]
    if not steps:
        raise ConfigError("simulate.decision_steps is empty")
    bundles = ctx.corpus()
    corpus = [(b.trajectory, build_ledger(b, ctx.ledger)) for b in bundles]
    rows = []
    for s in steps:
        rows.extend(_sweep_step(ctx, corpus, s))
    _write_rows(ctx.path("comparison.csv"),
                ["step", "policy", "thresholds", "cv_mean_auc", "best_reduction_at_drop5",
                 "dominance_vs_random_band", "classifier_dominance_vs_policy"], rows, ctx.footer)
    return 0


def _load_model(path) -> BoostedModel:
    if path is None:
        raise ConfigError("--model is required")
    if not Path(path).is_file():
        raise ConfigError(f"model file not found: {path}")
    try:
        return BoostedModel.load(path)
    except (KeyError, ValueError, TypeError) as exc:
        raise GBDTError(f"cannot read model {path}: {exc}") from exc


def _model_feature_config(model: BoostedModel, ctx: Context) -> FeatureConfig:
    md = model.metadata
    try:
        return FeatureConfig(k=int(md["k"]), max_lcs_tokens=int(md["max_lcs_tokens"]), step=int(md["step"]))
    except KeyError as exc:
        raise GBDTError(f"model metadata lacks {exc}") from exc


def cmd_importance(ctx: Context, args) -> int:
    model = _load_model(args.model)
    fc = _model_feature_config(model, ctx)
    matrix = build_matrix([b.trajectory for b in ctx.corpus()], fc)
    imp = feature_importance(model, matrix)
    order = sorted(range(len(imp)), key=lambda j: (-imp[j], matrix.names[j]))
    rows = [[matrix.names[j], repr(float(imp[j]))] for j in order]
    name = f"importance_s{fc.step}.csv"
    _write_rows(ctx.path(name), ["feature", "mean_abs_shap"], rows, ctx.footer)
    for feat, v in rows[:5]:
        print(f"{feat:16s} {float(v):.6f}")
    return 0


def cmd_decide(ctx: Context, args) -> int:
    model = _load_model(args.model)
    fc = _model_feature_config(model, ctx)
    if args.trace is None or not Path(args.trace).is_file():
        raise ConfigError(f"trace file not found: {args.trace}")
    traj = load_trajectory(args.trace)
    vec = build_vector(traj, fc)
    p = float(model.predict_proba(vec.values[None, :])[0])
    verdict = "stop" if p < args.threshold else "continue"
    print(f"{verdict} p_success={p!r} step={fc.step} threshold={args.threshold!r}")
    return 0


def cmd_synth(ctx: Context, args) -> int:
    spec = SynthSpec.from_dict(ctx.cfg["synth"])
    target = Path(args.dest) if args.dest else ctx.out
    bundles = synthesize_corpus(spec, ctx.seed, target)
    n_succ = sum(b.trajectory.outcome for b in bundles)
    print(f"{len(bundles)} runs ({n_succ} successes) written to {target}")
    return 0


COMMANDS: dict[str, tuple[Callable[[Context, Any], int], bool, str]] = {
    "validate": (cmd_validate, True, "check every trace/power pair in the corpus"),
    "energy": (cmd_energy, True, "per-run energy ledgers and a per-class summary"),
    "featurize": (cmd_featurize, True, "feature matrix for one decision step"),
    "train": (cmd_train, True, "nested CV report plus a final model for one decision step"),
    "sweep": (cmd_sweep, True, "policy curves per decision step from out-of-fold scores"),
    "importance": (cmd_importance, True, "mean |SHAP| per feature for a trained model"),
    "decide": (cmd_decide, False, "continue/stop verdict for one partial trace"),
    "synth": (cmd_synth, False, "write a synthetic labeled corpus"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("config overrides")
    g.add_argument("--config", help="YAML or JSON run config")
    g.add_argument("--seed", type=int, help="master seed (seed)")
    g.add_argument("--out", help="output directory (output_dir)")
    g.add_argument("--corpus", help="corpus directory (corpus_dir)")
    g.add_argument("--jobs", type=int, help="parallel workers for cross-validation (jobs)")
    g.add_argument("--k", type=int, help="tail logprobs per step (feature.k)")
    g.add_argument("--max-lcs-tokens", type=int, help="LCS truncation (feature.max_lcs_tokens)")
    g.add_argument("--gap-cap-ms", type=float, help="power gap cap (energy.gap_cap_ms)")
    g.add_argument("--cutoff-step", type=int, help="ledger cutoff (simulate.cutoff_step)")
    g.add_argument("--plot", action="store_const", const=True, help="write SVG curves (simulate.plot)")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. selection.outer_k=3")
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stopwatt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stopwatt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("featurize", "train", "sweep"):
            p.add_argument("--step", type=int, help="decision step")
        if name in ("importance", "decide"):
            p.add_argument("--model", help="model artifact (JSON)")
        if name == "decide":
            p.add_argument("--trace", help="partial trajectory file")
            p.add_argument("--threshold", type=float, default=0.5, help="stop when p_success is below this")
        if name == "synth":
            p.add_argument("--dest", help="corpus output directory (defaults to --out)")
            p.add_argument("--n", type=int, help="number of runs (synth.n)")
            p.add_argument("--shift", type=float, help="failure signal strength (synth.shift)")
    return parser


_FLAG_KEYS = {
    "seed": "seed", "out": "output_dir", "corpus": "corpus_dir", "jobs": "jobs", "k": "feature.k",
    "max_lcs_tokens": "feature.max_lcs_tokens", "gap_cap_ms": "energy.gap_cap_ms",
    "cutoff_step": "simulate.cutoff_step", "plot": "simulate.plot", "n": "synth.n", "shift": "synth.shift",
}


def _overrides(args) -> dict[str, Any]:
    out = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items() if hasattr(args, flag)}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = parse_value(value)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    fn, needs_corpus, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, _overrides(args))
        if cfg["simulate"]["cutoff_step"] is not None:
            cfg["simulate"]["cutoff_step"] = int(cfg["simulate"]["cutoff_step"])
        ctx = Context(cfg, needs_corpus)
        return fn(ctx, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
