import json

import numpy as np
import pytest
from scipy.stats import wilcoxon

from stssad import evaluation
from stssad.evaluation import EvaluationError, ResultRow, ScoredTestSet


def test_auc_examples():
    assert evaluation.auc(ScoredTestSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert evaluation.auc(ScoredTestSet([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])) == 0.0
    assert evaluation.auc(ScoredTestSet([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1])) == 0.5


def test_auc_permutation_invariant_and_matches_oracle():
    rng = np.random.default_rng(0)
    s, y = rng.integers(0, 4, size=30).astype(float), rng.integers(0, 2, size=30)
    y[:2] = (0, 1)
    perm = rng.permutation(30)
    a = evaluation.auc(ScoredTestSet(s, y))
    assert a == evaluation.auc(ScoredTestSet(s[perm], y[perm])) == evaluation.auc_pairs(ScoredTestSet(s, y))


def test_auc_needs_both_classes():
    with pytest.raises(EvaluationError, match="both classes"):
        evaluation.auc(ScoredTestSet([1.0, 2.0], [0, 0]))
    with pytest.raises(EvaluationError):
        ScoredTestSet([1.0], [0, 1])


def test_wilcoxon_small_cases():
    assert evaluation.wilcoxon_one_sided([1, 2, 3, 4, 5]) == 0.03125
    assert evaluation.wilcoxon_one_sided([-1, -2, -3, -4, -5]) == 1.0
    # zeros are dropped before counting pairs
    assert evaluation.wilcoxon_one_sided([0, 0, 1, 2, 3, 4, 5]) == 0.03125
    with pytest.raises(evaluation.DegenerateComparison):
        evaluation.wilcoxon_one_sided([0.0] * 6)
    with pytest.raises(EvaluationError, match="at least 5"):
        evaluation.wilcoxon_one_sided([1, 2, 0, 0, 3])


@pytest.mark.parametrize("n", [6, 10, 12])
def test_wilcoxon_exact_agrees_with_scipy(n):
    d = np.random.default_rng(n).normal(0.2, 1, size=n)
    ref = wilcoxon(d, alternative="greater", method="exact").pvalue
    assert evaluation.wilcoxon_one_sided(d) == pytest.approx(ref, abs=1e-12)


def test_wilcoxon_normal_approximation_above_twelve():
    d = np.random.default_rng(1).normal(0.3, 1, size=30)
    ref = wilcoxon(d, alternative="greater", method="approx", correction=False).pvalue
    assert evaluation.wilcoxon_one_sided(d) == pytest.approx(ref, rel=1e-10)


def _rows(tasks=("a", "b"), methods=("st_ssad", "rs"), seeds=(0, 1, 2)):
    rng = np.random.default_rng(0)
    return [ResultRow(t, m, s, float(0.5 + 0.4 * (m == "st_ssad") + 0.05 * rng.random()))
            for t in tasks for m in methods for s in seeds]


def test_build_table_statistics():
    rows = _rows()
    table = evaluation.build_table(rows)
    assert table.methods[0] == "st_ssad"
    vals = [r.auc for r in rows if r.task == "a" and r.method == "rs"]
    assert table.mean["a", "rs"] == pytest.approx(np.mean(vals))
    assert table.std["a", "rs"] == pytest.approx(np.std(vals, ddof=1))
    assert table.pvalues["rs"] == pytest.approx(0.015625)


def test_build_table_flags_missing_and_duplicate_cells():
    rows = _rows()
    with pytest.raises(EvaluationError, match="missing cells: b/rs/seed2"):
        evaluation.build_table(rows[:-1])
    with pytest.raises(EvaluationError, match="duplicate"):
        evaluation.build_table(rows + rows[:1])


def test_degenerate_and_insufficient_pvalues():
    rows = [ResultRow("t", m, s, 1.0) for m in ("st_ssad", "rs") for s in range(6)]
    assert evaluation.build_table(rows).pvalues["rs"] == "degenerate"
    rows = _rows(tasks=("a",), seeds=(0, 1))
    assert evaluation.build_table(rows).pvalues["rs"] == "insufficient"


def test_markdown_bolds_row_best():
    md = evaluation.render_markdown(evaluation.build_table(_rows()))
    for line in md.splitlines()[2:4]:
        cells = line.split("|")[2:-1]
        assert cells[0].strip().startswith("**") and not cells[1].strip().startswith("**")


def test_reports_are_written_and_reproducible(tmp_path):
    rows = _rows()
    evaluation.write_reports(rows, tmp_path / "a")
    evaluation.write_reports(list(reversed(rows)), tmp_path / "b")
    for name in ("results.json", "results.csv", "table.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    payload = json.loads((tmp_path / "a" / "results.json").read_text())
    assert len(payload["results"]) == len(rows) and payload["table"]["reference"] == "st_ssad"
