"""Stratified folds, AUC-ROC, successive-halving search and nested cross-validation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.stats import rankdata

from .features import FeatureMatrix
from .gbdt import Booster, BoostedModel, HyperParams
from .seeding import derive_seed

log = logging.getLogger(__name__)


class SelectionError(ValueError):
    pass


# --------------------------------------------------------------------------- folds & AUC

@dataclass(frozen=True)
class FoldPlan:
    assignments: np.ndarray
    k: int
    seed: int

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


def stratified_folds(labels, k: int, seed: int) -> FoldPlan:
    """Shuffle each class with ``seed`` and deal its rows round-robin to ``k`` folds.

    Negatives continue dealing where positives stopped, which keeps total fold
    sizes within one of each other as well.
    """
    y = np.asarray(labels)
    if k < 2:
        raise SelectionError("need k >= 2 folds")
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    assign = np.full(y.shape[0], -1, dtype=np.int64)
    offset = 0
    for cls in (1, 0):
        rows = np.flatnonzero(y == cls)
        if rows.size < k:
            raise SelectionError(f"class {cls} has {rows.size} rows, fewer than k={k}")
        rows = rng.permutation(rows)
        assign[rows] = (offset + np.arange(rows.size)) % k
        offset = (offset + rows.size) % k
    if np.any(assign < 0):
        raise SelectionError("labels must be 0/1")
    return FoldPlan(assign, k, seed)


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SelectionError("AUC needs both classes")
    ranks = rankdata(s, method="average")
    r_pos = math.fsum(ranks[pos])
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# --------------------------------------------------------------------------- search space

@dataclass(frozen=True)
class SearchSpace:
    max_depth: tuple[int, int] = (3, 7)
    learning_rate: tuple[float, float] = (0.005, 0.2)
    min_child_weight: tuple[int, int] = (1, 7)
    subsample: tuple[float, float] = (0.3, 0.7)
    colsample: tuple[float, float] = (0.3, 0.7)
    gamma: tuple[float, float] = (0.0, 5.0)

    def sample(self, rng: np.random.Generator, rounds: int = 10) -> HyperParams:
        lo, hi = self.learning_rate
        return HyperParams(
            max_depth=int(rng.integers(self.max_depth[0], self.max_depth[1] + 1)),
            learning_rate=float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            min_child_weight=float(rng.integers(self.min_child_weight[0], self.min_child_weight[1] + 1)),
            subsample=float(rng.uniform(*self.subsample)),
            colsample=float(rng.uniform(*self.colsample)),
            gamma=float(rng.uniform(*self.gamma)),
            rounds=rounds,
        )

    def contains(self, p: HyperParams) -> bool:
        return (
            self.max_depth[0] <= p.max_depth <= self.max_depth[1]
            and self.learning_rate[0] <= p.learning_rate <= self.learning_rate[1]
            and self.min_child_weight[0] <= p.min_child_weight <= self.min_child_weight[1]
            and self.subsample[0] <= p.subsample <= self.subsample[1]
            and self.colsample[0] <= p.colsample <= self.colsample[1]
            and self.gamma[0] <= p.gamma <= self.gamma[1]
        )


@dataclass(frozen=True)
class HalvingConfig:
    n_candidates: int = 16
    min_rounds: int = 10
    factor: int = 3
    max_rounds: int = 270

    def schedule(self) -> list[int]:
        rungs, r = [], 0
        while True:
            rounds = min(self.min_rounds * self.factor ** r, self.max_rounds)
            rungs.append(rounds)
            if rounds >= self.max_rounds:
                return rungs
            r += 1


@dataclass
class HalvingResult:
    best: HyperParams
    rounds: int
    rungs: list[dict[str, Any]] = field(default_factory=list)  # per rung: rounds, candidates, scores, survivors
    candidates: list[HyperParams] = field(default_factory=list)


def _booster(matrix: FeatureMatrix, rows: np.ndarray, params: HyperParams, seed: int) -> Booster:
    """Single entry point for every model trained during selection."""
    sub = matrix.subset(rows)
    return Booster(sub.X, sub.y, params, seed, matrix.names)


def halving_search(matrix: FeatureMatrix, space: SearchSpace | None = None, inner_k: int = 3, seed: int = 0,
                   config: HalvingConfig | None = None, candidates: Sequence[HyperParams] | None = None
                   ) -> HalvingResult:
    """Successive halving over boosting rounds, scored by mean inner-fold AUC.

    Every surviving candidate keeps one booster per inner fold and is grown to
    the next rung's round count, so rung ``r`` costs only the new rounds.
    """
    space = space or SearchSpace()
    config = config or HalvingConfig()
    if candidates is None:
        rng = np.random.default_rng(derive_seed(seed, "candidates"))
        candidates = [space.sample(rng) for _ in range(config.n_candidates)]
    candidates = list(candidates)
    plan = stratified_folds(matrix.y, inner_k, derive_seed(seed, "inner"))
    fit_seed = derive_seed(seed, "fit")

    boosters: dict[tuple[int, int], tuple[Booster, int, np.ndarray]] = {}
    alive = list(range(len(candidates)))
    rungs: list[dict[str, Any]] = []
    schedule = config.schedule()
    scores: dict[int, float] = {}
    for r, rounds in enumerate(schedule):
        scores = {}
        for ci in alive:
            aucs = []
            for fold in range(inner_k):
                key = (ci, fold)
                if key not in boosters:
                    tr, te = plan.train_test(fold)
                    b = _booster(matrix, tr, candidates[ci], fit_seed)
                    boosters[key] = (b, b.add_eval(matrix.X[te]), te)
                b, handle, te = boosters[key]
                b.grow(rounds)
                aucs.append(auc_roc(b.eval_margin(handle), matrix.y[te]))
            scores[ci] = float(np.mean(aucs))
        ranked = sorted(alive, key=lambda c: (-scores[c], c))
        last = r == len(schedule) - 1
        keep = ranked if last else ranked[: math.ceil(len(alive) / config.factor)]
        rungs.append({"rung": r, "rounds": rounds, "candidates": list(alive),
                      "scores": [scores[c] for c in alive], "survivors": sorted(keep)})
        log.debug("rung %d (%d rounds): %d -> %d", r, rounds, len(alive), len(keep))
        for ci in alive:
            if ci not in keep:
                for fold in range(inner_k):
                    boosters.pop((ci, fold), None)
        alive = sorted(keep)
    winner = sorted(alive, key=lambda c: (-scores[c], c))[0]
    rounds = schedule[-1]
    return HalvingResult(candidates[winner].with_rounds(rounds), rounds, rungs, candidates)


# --------------------------------------------------------------------------- nested CV

@dataclass
class OuterFold:
    fold: int
    auc: float
    best_params: HyperParams
    rounds_used: int
    train_run_ids: list[str]
    test_run_ids: list[str]
    rungs: list[dict[str, Any]]


@dataclass
class CVReport:
    folds: list[OuterFold]
    oof_scores: np.ndarray
    run_ids: list[str]
    labels: np.ndarray

    @property
    def mean_auc(self) -> float:
        return float(np.mean([f.auc for f in self.folds]))

    @property
    def ci95_halfwidth(self) -> float:
        aucs = np.array([f.auc for f in self.folds])
        if aucs.size < 2:
            return float("nan")
        return float(1.96 * aucs.std(ddof=1) / math.sqrt(aucs.size))

    def score_map(self) -> dict[str, float]:
        return dict(zip(self.run_ids, map(float, self.oof_scores)))

    def write_csv(self, path, footer: str | None = None) -> None:
        names = [f.name for f in HyperParams.__dataclass_fields__.values()]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "auc", "rounds", *names])
            for f in self.folds:
                p = asdict(f.best_params)
                w.writerow([f.fold, repr(f.auc), f.rounds_used, *(repr(p[n]) for n in names)])
            fh.write(f"# summary mean_auc={self.mean_auc!r} ci95_halfwidth={self.ci95_halfwidth!r} "
                     f"folds={len(self.folds)}\n")
            if footer:
                fh.write(footer)

    def write_oof_csv(self, path, footer: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run_id", "score", "label"])
            for rid, s, y in zip(self.run_ids, self.oof_scores, self.labels):
                w.writerow([rid, repr(float(s)), int(y)])
            if footer:
                fh.write(footer)


def _outer_fold(matrix: FeatureMatrix, plan: FoldPlan, fold: int, space, inner_k, seed, config):
    train, test = plan.train_test(fold)
    inner = matrix.subset(train)
    fold_seed = derive_seed(seed, "outer", fold)
    search = halving_search(inner, space, inner_k, fold_seed, config)
    booster = _booster(matrix, train, search.best, derive_seed(fold_seed, "refit"))
    booster.grow(search.rounds)
    proba = booster.model().predict_proba(matrix.X[test])
    return OuterFold(
        fold=fold,
        auc=auc_roc(proba, matrix.y[test]),
        best_params=search.best,
        rounds_used=search.rounds,
        train_run_ids=[matrix.run_ids[i] for i in train],
        test_run_ids=[matrix.run_ids[i] for i in test],
        rungs=search.rungs,
    ), test, proba, booster.model()


def nested_cv(matrix: FeatureMatrix, outer_k: int = 5, inner_k: int = 3, seed: int = 0,
              space: SearchSpace | None = None, config: HalvingConfig | None = None,
              n_jobs: int = 1) -> tuple[CVReport, list[BoostedModel]]:
    """Outer stratified folds for testing, halving search on inner folds for tuning."""
    plan = stratified_folds(matrix.y, outer_k, derive_seed(seed, "outer-plan"))
    if n_jobs == 1:
        results = [_outer_fold(matrix, plan, f, space, inner_k, seed, config) for f in range(outer_k)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_outer_fold)(matrix, plan, f, space, inner_k, seed, config) for f in range(outer_k)
        )
    oof = np.full(len(matrix), np.nan)
    folds, models = [], []
    for fold, test, proba, model in results:
        oof[test] = proba
        folds.append(fold)
        models.append(model)
    return CVReport(folds, oof, list(matrix.run_ids), matrix.y.copy()), models


def train_final(matrix: FeatureMatrix, seed: int = 0, inner_k: int = 3, space: SearchSpace | None = None,
                config: HalvingConfig | None = None) -> tuple[BoostedModel, HalvingResult]:
    """Halving search on all rows, then refit the winner on all rows."""
    search = halving_search(matrix, space, inner_k, derive_seed(seed, "final"), config)
    booster = _booster(matrix, np.arange(len(matrix)), search.best, derive_seed(seed, "final", "refit"))
    return booster.grow(search.rounds).model(), search
