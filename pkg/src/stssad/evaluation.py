"""Label-aware evaluation: AUC, one-sided Wilcoxon signed-rank test, comparison reports.

This is the only module that opens sealed test labels.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

from .datagen import ANOMALY, NORMAL, Dataset, SealedLabels
from .detector import score_images

EXACT_MAX_N = 12
MIN_PAIRS = 5
REFERENCE = "st_ssad"


class EvaluationError(ValueError):
    pass


class DegenerateComparison(EvaluationError):
    """Every paired difference is zero."""


def unseal(labels: SealedLabels) -> np.ndarray:
    return labels._unseal()


@dataclass
class ScoredTestSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise EvaluationError(f"{self.scores.size} scores but {self.labels.size} labels")


def auc(scored: ScoredTestSet) -> float:
    """P(random anomaly outscores random normal), ties counted half."""
    pos = scored.labels == ANOMALY
    neg = scored.labels == NORMAL
    n1, n0 = int(pos.sum()), int(neg.sum())
    if n1 == 0 or n0 == 0:
        raise EvaluationError(f"AUC needs both classes, got {n1} anomalies and {n0} normals")
    ranks = rankdata(scored.scores[pos | neg])
    r1 = ranks[pos[pos | neg]].sum()
    return float((r1 - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auc_pairs(scored: ScoredTestSet) -> float:
    """Brute-force pair counting, kept as a reference implementation."""
    a = scored.scores[scored.labels == ANOMALY]
    b = scored.scores[scored.labels == NORMAL]
    if a.size == 0 or b.size == 0:
        raise EvaluationError("AUC needs both classes")
    diff = a[:, None] - b[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def _signed_rank_stat(d: np.ndarray) -> tuple[float, np.ndarray]:
    ranks = rankdata(np.abs(d))
    return float(ranks[d > 0].sum()), ranks


def wilcoxon_one_sided(differences) -> float:
    """p-value for the alternative "differences tend to be positive".

    Zeros are dropped. Up to 12 remaining pairs the null distribution is
    enumerated over all sign assignments; above that a normal approximation with
    tie correction is used.
    """
    d = np.asarray(differences, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(d)):
        raise EvaluationError("differences must be finite")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateComparison("all paired differences are zero")
    if n < MIN_PAIRS:
        raise EvaluationError(f"need at least {MIN_PAIRS} non-zero differences, got {n}")
    w, ranks = _signed_rank_stat(d)
    if n <= EXACT_MAX_N:
        return wilcoxon_exact(ranks, w)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    return float(norm.sf((w - mean) / np.sqrt(var)))


def wilcoxon_exact(ranks, w: float) -> float:
    """P(W+ >= w) with every sign pattern of ``ranks`` equally likely."""
    ranks = np.asarray(ranks, dtype=np.float64)
    signs = np.array(list(itertools.product((0.0, 1.0), repeat=ranks.size)))
    stats = signs @ ranks
    return float(np.mean(stats >= w - 1e-9))


def scored_test_set(params, dataset: Dataset) -> ScoredTestSet:
    return ScoredTestSet(score_images(params, dataset.train, dataset.test), unseal(dataset.test_labels))


def evaluate_run(run, dataset: Dataset) -> tuple[ScoredTestSet, float]:
    """Score the test set with a run's final detector and compute its AUC."""
    if run.params is None:
        raise EvaluationError(f"run {run.index} has no trained parameters")
    scored = scored_test_set(run.params, dataset)
    return scored, auc(scored)


# ---------------------------------------------------------------------------
# comparison tables

@dataclass
class ResultRow:
    task: str
    method: str
    seed: int
    auc: float

    def key(self):
        return (self.task, self.method, self.seed)


@dataclass
class ComparisonTable:
    tasks: list[str]
    methods: list[str]
    seeds: list[int]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    pvalues: dict = field(default_factory=dict)
    reference: str = REFERENCE

    def to_dict(self) -> dict:
        return {
            "tasks": self.tasks,
            "methods": self.methods,
            "seeds": self.seeds,
            "reference": self.reference,
            "cells": [
                {"task": t, "method": m, "mean": self.mean[t, m], "std": self.std[t, m]}
                for t in self.tasks for m in self.methods
            ],
            "pvalues": self.pvalues,
        }


def _as_rows(results) -> list[ResultRow]:
    rows = []
    for r in results:
        rows.append(r if isinstance(r, ResultRow) else ResultRow(str(r["task"]), str(r["method"]),
                                                                  int(r["seed"]), float(r["auc"])))
    return rows


def build_table(results, reference: str = REFERENCE) -> ComparisonTable:
    """Per-cell mean and standard deviation over seeds, and reference-vs-baseline p-values.

    A p-value entry is a float, or the string ``"degenerate"`` when every paired
    difference is zero, or ``"insufficient"`` when fewer than 5 differ.
    """
    rows = _as_rows(results)
    if not rows:
        raise EvaluationError("no results to tabulate")
    tasks = sorted({r.task for r in rows})
    methods = sorted({r.method for r in rows}, key=lambda m: (m != reference, m))
    seeds = sorted({r.seed for r in rows})
    cells = {}
    for r in rows:
        if r.key() in cells:
            raise EvaluationError(f"duplicate result for {r.key()}")
        cells[r.key()] = r.auc
    missing = [k for k in itertools.product(tasks, methods, seeds) if k not in cells]
    if missing:
        listed = ", ".join(f"{t}/{m}/seed{s}" for t, m, s in missing)
        raise EvaluationError(f"missing cells: {listed}")

    table = ComparisonTable(tasks, methods, seeds, reference=reference)
    for t in tasks:
        for m in methods:
            v = np.array([cells[t, m, s] for s in seeds])
            table.mean[t, m] = float(v.mean())
            table.std[t, m] = float(v.std(ddof=1)) if v.size > 1 else 0.0
    if reference in methods:
        for m in methods:
            if m == reference:
                continue
            d = [cells[t, reference, s] - cells[t, m, s] for t in tasks for s in seeds]
            try:
                table.pvalues[m] = wilcoxon_one_sided(d)
            except DegenerateComparison:
                table.pvalues[m] = "degenerate"
            except EvaluationError:
                table.pvalues[m] = "insufficient"
    return table


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def render_markdown(table: ComparisonTable) -> str:
    out = io.StringIO()
    out.write("| task | " + " | ".join(table.methods) + " |\n")
    out.write("|---|" + "---|" * len(table.methods) + "\n")
    for t in table.tasks:
        best = max(table.mean[t, m] for m in table.methods)
        cells = []
        for m in table.methods:
            txt = f"{_fmt(table.mean[t, m])} ± {_fmt(table.std[t, m])}"
            cells.append(f"**{txt}**" if table.mean[t, m] == best else txt)
        out.write(f"| {t} | " + " | ".join(cells) + " |\n")
    if table.pvalues:
        out.write(f"\nOne-sided Wilcoxon signed-rank p-values, {table.reference} > baseline, "
                  f"paired over {len(table.tasks)} tasks x {len(table.seeds)} seeds:\n\n")
        out.write("| baseline | p-value |\n|---|---|\n")
        for m, p in table.pvalues.items():
            out.write(f"| {m} | {p if isinstance(p, str) else f'{p:.6g}'} |\n")
    return out.getvalue()


def write_reports(results, out_dir, reference: str = REFERENCE) -> ComparisonTable:
    """Emit results.json, results.csv and table.md into ``out_dir``."""
    rows = sorted(_as_rows(results), key=ResultRow.key)
    table = build_table(rows, reference)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"results": [vars(r) for r in rows], "table": table.to_dict()}
    (out / "results.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "method", "seed", "auc"])
    for r in rows:
        w.writerow([r.task, r.method, r.seed, repr(r.auc)])
    (out / "results.csv").write_text(buf.getvalue())
    (out / "table.md").write_text(render_markdown(table))
    return table
