"""Trajectory features: per-step logprob tails, token counts and step overlap."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .trace_model import Step, Trajectory


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    k: int = 10
    max_lcs_tokens: int = 4096
    step: int = 1

    def __post_init__(self):
        if self.k < 1 or self.step < 1 or self.max_lcs_tokens < 1:
            raise FeatureError(f"invalid feature config {self}")


def tail_probs(step: Step, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` smallest logprobs of a step, exponentiated, ascending.

    Returns ``(values, missing)``; slots beyond the step's token count are NaN
    and flagged in ``missing``.
    """
    lp = np.sort(np.asarray(step.logprobs, dtype=np.float64))[:k]
    values = np.full(k, np.nan)
    values[: lp.size] = np.exp(lp)
    missing = np.ones(k, dtype=bool)
    missing[: lp.size] = False
    return values, missing


def token_count(step: Step) -> int:
    return len(step.tokens)


def _intern(*seqs: Sequence[str]) -> list[np.ndarray]:
    table: dict[str, int] = {}
    return [np.array([table.setdefault(t, len(table)) for t in s], dtype=np.int64) for s in seqs]


def overlap_ratio(prev: Sequence[str], cur: Sequence[str], max_lcs_tokens: int = 4096) -> float:
    """Longest-common-subsequence length over the previous step's length.

    Both sequences are truncated to their last ``max_lcs_tokens`` tokens first.
    """
    prev = list(prev)[-max_lcs_tokens:]
    cur = list(cur)[-max_lcs_tokens:]
    if not prev:
        return 0.0
    a, b = _intern(prev, cur)
    return kernels.lcs_length(a, b) / len(prev)


def feature_names(step: int, k: int) -> list[str]:
    names = []
    for i in range(1, step + 1):
        names.extend(f"s{i}_tail{j:02d}" for j in range(1, k + 1))
        names.append(f"s{i}_tokens")
    names.extend(f"ov_{i - 1}_{i}" for i in range(2, step + 1))
    return names


def vector_length(step: int, k: int) -> int:
    return step * (k + 1) + (step - 1)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    missing_mask: np.ndarray
    names: tuple[str, ...]


def build_vector(traj: Trajectory, config: FeatureConfig) -> FeatureVector:
    """Feature vector for the prefix of ``traj`` ending at ``config.step``."""
    s = config.step
    if traj.n_steps < s:
        raise FeatureError(f"run {traj.run_id} has {traj.n_steps} steps, fewer than decision step {s}")
    values, missing = [], []
    for step in traj.steps[:s]:
        v, m = tail_probs(step, config.k)
        values.extend(v)
        missing.extend(m)
        values.append(float(token_count(step)))
        missing.append(False)
    for i in range(1, s):
        values.append(overlap_ratio(traj.steps[i - 1].texts, traj.steps[i].texts, config.max_lcs_tokens))
        missing.append(False)
    return FeatureVector(np.array(values), np.array(missing, dtype=bool), tuple(feature_names(s, config.k)))


@dataclass
class FeatureMatrix:
    run_ids: list[str]
    X: np.ndarray  # NaN where missing
    y: np.ndarray
    names: list[str]
    config: FeatureConfig
    ineligible: list[str] = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        return np.isnan(self.X)

    def __len__(self) -> int:
        return len(self.run_ids)

    def subset(self, rows: Sequence[int] | np.ndarray) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureMatrix([self.run_ids[i] for i in rows], self.X[rows], self.y[rows], self.names, self.config)

    def with_labels(self, y: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(list(self.run_ids), self.X, np.asarray(y, dtype=float), self.names, self.config,
                             list(self.ineligible))

    def write_csv(self, path, footer: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run_id", "label", *self.names])
            for rid, label, row in zip(self.run_ids, self.y, self.X):
                w.writerow([rid, int(label), *("" if math.isnan(v) else repr(float(v)) for v in row)])
            if footer:
                fh.write(footer)


def build_matrix(corpus: Iterable[Trajectory], config: FeatureConfig) -> FeatureMatrix:
    """Stack vectors of all runs reaching ``config.step``, rows sorted by run_id."""
    trajs = sorted(corpus, key=lambda t: t.run_id)
    eligible = [t for t in trajs if t.n_steps >= config.step]
    ineligible = [t.run_id for t in trajs if t.n_steps < config.step]
    if not eligible:
        raise FeatureError(f"zero eligible runs: no run reaches step {config.step}")
    vecs = [build_vector(t, config) for t in eligible]
    return FeatureMatrix(
        run_ids=[t.run_id for t in eligible],
        X=np.vstack([v.values for v in vecs]),
        y=np.array([t.outcome for t in eligible], dtype=float),
        names=feature_names(config.step, config.k),
        config=config,
        ineligible=ineligible,
    )
