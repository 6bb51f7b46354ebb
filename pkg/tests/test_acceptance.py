"""Acceptance criteria, one test per criterion.

Each criterion records a single PASS/FAIL line (collected into the pytest
terminal summary by conftest.py). Run directly with ``python3 tests/test_acceptance.py``
to print the lines without pytest.

Criteria 5-8 train detectors on the synthetic recovery testbeds and take tens
of minutes on one CPU core; results are cached for the session so criterion 5
reuses the ST-SSAD cells of criterion 7.
"""

from __future__ import annotations

import functools
import itertools
import json
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import rankdata, wilcoxon

from stssad import cli, evaluation, experiments, gradcheck, tuner, valloss
from stssad.tensor import Tensor, grad, reshape, slice_rows, tape_scope

REPORT: dict[int, tuple[bool, str]] = {}

CUTDIFF_SEEDS = (0, 1, 2, 3, 4)
RECOVERY_SEEDS = (0, 1, 2)
ROTATION_SEEDS = (0, 1, 2)
ANGLE_TOL_DEG = 15.0


def record(n: int, passed: bool, detail: str) -> bool:
    REPORT[n] = (bool(passed), detail)
    return bool(passed)


def report_lines() -> list[str]:
    return [f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}" for n, (ok, detail) in sorted(REPORT.items())]


# ---------------------------------------------------------------------------
# shared experiment cells

@functools.lru_cache(maxsize=None)
def cutdiff_cell(task_index: int, seed: int, method: str) -> experiments.CellResult:
    spec = experiments.cutdiff_recovery_specs(seed)[task_index]
    return experiments.run_cell(spec, method)


@functools.lru_cache(maxsize=None)
def rotation_cell(seed: int) -> experiments.CellResult:
    return experiments.run_cell(experiments.rotation_recovery_spec(seed), "st_ssad")


N_TASKS = len(experiments.CUTDIFF_SIZES) * len(experiments.CUTDIFF_RATIOS)


# ---------------------------------------------------------------------------
# criteria

def criterion_1() -> bool:
    loss = valloss.mean_distance_loss(valloss.normalize_tpsd(valloss.scalar_configuration(0.0, 0.0))).item()
    return record(1, abs(loss - 1.0) <= 1e-6, f"perfect alignment L_val = {loss!r} (|err| {abs(loss - 1):.2e} <= 1e-6)")


def _scalar_loss(u: Tensor) -> Tensor:
    col = reshape(u, (2, 1))
    batch = valloss.scalar_configuration(slice_rows(col, 0, 1), slice_rows(col, 1, 2))
    return valloss.mean_distance_loss(valloss.normalize_tpsd(batch))


def criterion_2() -> bool:
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(100, 2))
    err = max(abs(_scalar_loss(Tensor(p)).item() - valloss.appendix_oracle(*p)) for p in pts)

    axis = np.linspace(-1, 1, 41)
    values = np.array([[valloss.appendix_oracle(u1, u2) for u2 in axis] for u1 in axis])
    i, j = np.unravel_index(np.argmin(values), values.shape)
    argmin = (float(axis[i]), float(axis[j]))

    toward, total = 0, 0
    for u1, u2 in itertools.product(axis, axis):
        if u1 == 0 and u2 == 0:
            continue
        with tape_scope():
            u = Tensor([u1, u2], requires_grad=True)
            (g,) = grad(_scalar_loss(u), [u])
        # negative gradient has positive inner product with the direction to the origin
        toward += float(np.dot(-g.data, -np.array([u1, u2]))) > 0
        total += 1
    frac = toward / total
    ok = err <= 1e-8 and argmin == (0.0, 0.0) and frac >= 0.95
    return record(2, ok, f"oracle max err {err:.2e} <= 1e-8; grid argmin {argmin}; "
                         f"descent points to optimum at {frac:.1%} >= 95% of grid")


def criterion_3() -> bool:
    rng = np.random.default_rng(3)
    worst = dict(mean=0.0, fro=0.0, tpsd=0.0, affine=0.0)
    for _ in range(100):
        counts = tuple(int(c) for c in rng.integers(2, 12, size=3))
        d = int(rng.integers(1, 9))
        rows = rng.normal(size=(sum(counts), d)) * rng.uniform(0.1, 10) + rng.normal(size=d) * 5
        batch = valloss.EmbeddingBatch(Tensor(rows), counts)
        z = valloss.normalize_tpsd(batch).rows.data
        n = z.shape[0]
        worst["mean"] = max(worst["mean"], np.abs(z.mean(axis=0)).max())
        worst["fro"] = max(worst["fro"], abs((z**2).sum() - n))
        worst["tpsd"] = max(worst["tpsd"], abs(valloss.tpsd(Tensor(z)).item() - 2 * n**2) / (2 * n**2))
        # similarity transform: positive scale, rotation, translation
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        moved = rng.uniform(0.01, 100) * rows @ q + rng.normal(size=d) * 50
        base = valloss.mean_distance_loss(valloss.normalize_tpsd(batch)).item()
        other = valloss.mean_distance_loss(valloss.normalize_tpsd(valloss.EmbeddingBatch(Tensor(moved), counts))).item()
        worst["affine"] = max(worst["affine"], abs(base - other))
    ok = worst["mean"] <= 1e-10 and worst["fro"] <= 1e-8 and worst["tpsd"] <= 1e-6 and worst["affine"] <= 1e-8
    return record(3, ok, "100 batches: |row mean| {mean:.1e} <= 1e-10, | ||Z'||^2 - N | {fro:.1e} <= 1e-8, "
                         "TPSD rel err {tpsd:.1e} <= 1e-6, loss change under scale/rotation/shift "
                         "{affine:.1e} <= 1e-8".format(**worst))


def criterion_4() -> bool:
    t0 = time.perf_counter()
    reports = gradcheck.run_suites()
    toy_err, fo_err = 0.0, 0.0
    for theta, a, alpha in [(1.0, 0.0, 0.1), (-0.7, 0.4, 0.05), (2.5, -1.0, 0.3), (0.3, 0.3, 0.2)]:
        theta_prime = theta - alpha * 2 * (theta - a)
        toy_err = max(toy_err, abs(tuner.scalar_toy_gradient(theta, a, alpha, True) - 4 * alpha * theta_prime))
        # first order treats theta' as constant, so the only path through a vanishes
        fo_err = max(fo_err, abs(tuner.scalar_toy_gradient(theta, a, alpha, False)))
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in reports) and toy_err <= 1e-10 and fo_err <= 1e-10 and elapsed < 120
    detail = "; ".join(r.summary() for r in reports)
    return record(4, ok, f"{detail}; scalar toy |g - 4 alpha theta'| {toy_err:.1e}, first-order |g| {fo_err:.1e} "
                         f"(<= 1e-10); {elapsed:.0f}s < 120s")


def criterion_5() -> bool:
    t0 = time.perf_counter()
    lines, ok_sizes, task_aucs = [], True, []
    for k in range(N_TASKS):
        cells = [cutdiff_cell(k, s, "st_ssad") for s in RECOVERY_SEEDS]
        true = cells[0].true_params["size"]
        med = float(np.median([experiments.learned_size(c.selected) for c in cells]))
        within = true / 2 <= med <= true * 2
        ok_sizes &= within
        task_aucs.append(float(np.mean([c.auc for c in cells])))
        lines.append(f"{cells[0].task}: size {med:.3f} vs {true:.2f} {'ok' if within else 'off'}, "
                     f"AUC {task_aucs[-1]:.3f}")
    med_auc = float(np.median(task_aucs))
    ok = ok_sizes and med_auc >= 0.90
    return record(5, ok, f"median AUC {med_auc:.3f} >= 0.90; sizes within x2 on every task: {ok_sizes} "
                         f"[{'; '.join(lines)}] ({time.perf_counter() - t0:.0f}s)")


def criterion_6() -> bool:
    t0 = time.perf_counter()
    cells = [rotation_cell(s) for s in ROTATION_SEEDS]
    errs = [np.degrees(experiments.angular_distance(c.selected.final_a.values[0], np.pi)) for c in cells]
    degs = [np.degrees(c.selected.final_a.values[0] % (2 * np.pi)) for c in cells]
    med_auc = float(np.median([c.auc for c in cells]))
    ok = all(e <= ANGLE_TOL_DEG for e in errs) and med_auc >= 0.90
    angles = ", ".join(f"seed {c.seed}: {d:.1f} deg" for c, d in zip(cells, degs))
    return record(6, ok, f"selected angles [{angles}], each within +-{ANGLE_TOL_DEG:g} deg of 180: "
                         f"{all(e <= ANGLE_TOL_DEG for e in errs)}; median AUC {med_auc:.3f} >= 0.90 "
                         f"({time.perf_counter() - t0:.0f}s)")


BASELINES = ("rs_cutdiff", "rd_cutdiff", "fo")


def criterion_7() -> bool:
    t0 = time.perf_counter()
    rows = [cutdiff_cell(k, s, m).row() for k in range(N_TASKS) for s in CUTDIFF_SEEDS
            for m in ("st_ssad",) + BASELINES]
    table = evaluation.build_table(rows)
    p = table.pvalues
    ok = all(isinstance(p[m], float) and p[m] < 0.05 for m in ("rs_cutdiff", "rd_cutdiff"))
    means = ", ".join(f"{m} {np.mean([table.mean[t, m] for t in table.tasks]):.3f}" for m in table.methods)
    shown = ", ".join(f"{m} {v if isinstance(v, str) else f'{v:.4g}'}" for m, v in p.items())
    return record(7, ok, f"one-sided Wilcoxon p-values [{shown}], need < 0.05 for RS and RD; "
                         f"mean AUC [{means}] ({time.perf_counter() - t0:.0f}s)")


def criterion_8() -> bool:
    t0 = time.perf_counter()
    problems, rows = [], []
    for m in ("mmd1", "mmd2"):
        for k in range(N_TASKS):
            c = cutdiff_cell(k, 0, m)
            for run in c.runs:
                losses = [v for st in run.trajectory for v in (st["l_trn"], st["l_val"])]
                if run.aborted or not losses or not np.all(np.isfinite(losses)):
                    problems.append(f"{c.task}/{m}/run{run.index}")
            if not np.isfinite(c.auc):
                problems.append(f"{c.task}/{m}: AUC")
            rows.append(c.row())
    table = evaluation.build_table(rows, reference="mmd1")
    mean = {m: np.mean([table.mean[t, m] for t in table.tasks]) for m in table.methods}
    return record(8, not problems, f"{len(rows)} MMD cells, finite losses and AUC everywhere: {not problems} "
                                   f"{problems or ''}; mean AUC mmd1 {mean['mmd1']:.3f}, mmd2 {mean['mmd2']:.3f} "
                                   f"({time.perf_counter() - t0:.0f}s)")


def _enumerated_p(d: np.ndarray) -> float:
    """Independent oracle: flip every sign pattern of |d| and count W+ >= observed."""
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((-1, 1), repeat=d.size):
        hits += ranks[np.array(signs) > 0].sum() >= observed - 1e-9
    return hits / 2**d.size


def criterion_9() -> bool:
    rng = np.random.default_rng(9)
    auc_mismatch = 0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 6, size=n) if rng.random() < 0.5 else rng.normal(size=n)
        s = evaluation.ScoredTestSet(scores, labels)
        auc_mismatch += evaluation.auc(s) != evaluation.auc_pairs(s)

    wil_err, instances = 0.0, 0
    for n in range(evaluation.MIN_PAIRS, 11):
        for _ in range(20):
            d = rng.normal(0.3, 1, size=n)
            if rng.random() < 0.5:
                d = np.round(d, 1)  # ties and zeros
            if np.count_nonzero(d) < evaluation.MIN_PAIRS:
                continue
            p = evaluation.wilcoxon_one_sided(d)
            wil_err = max(wil_err, abs(p - _enumerated_p(d)))
            if len(np.unique(np.abs(d))) == n and np.all(d != 0):
                wil_err = max(wil_err, abs(p - wilcoxon(d, alternative="greater", method="exact").pvalue))
            instances += 1
    p5 = evaluation.wilcoxon_one_sided([1, 2, 3, 4, 5])
    ok = auc_mismatch == 0 and wil_err <= 1e-12 and p5 == 0.03125
    return record(9, ok, f"AUC vs pair counting: {auc_mismatch}/1000 mismatches; Wilcoxon vs enumeration "
                         f"max err {wil_err:.1e} over {instances} instances (n <= 10); n=5 all positive p = {p5}")


DETERMINISM_CONFIG = {
    "version": 1,
    "datasets": [
        {"synth": {"size": 0.16, "ratio": 2.0, **experiments.RECOVERY_DATA}},
        {"synth": {"anomaly_kind": "rotation", "angle": 3.141592653589793, **experiments.RECOVERY_DATA}},
    ],
    "methods": ["st_ssad", "fo", "rs_cutdiff", "rd_cutdiff"],
    "tuner": {"alpha": 0.1, "beta": 0.01, "T": 8, "warm_epochs": 3, "patience": 8},
    "seeds": [0, 1],
}


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def criterion_10() -> bool:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = tmp / "config.json"
        cfg.write_text(json.dumps(DETERMINISM_CONFIG))
        spec = tmp / "spec.json"
        spec.write_text(json.dumps({"version": 1, "size": 0.08, "ratio": 0.5}))
        trees, codes = [], []
        for rep, workers in ((0, 1), (1, 2)):
            out = tmp / f"rep{rep}"
            codes.append(cli.main(["--out", str(out / "data"), "synth", str(spec)]))
            codes.append(cli.main(["--workers", str(workers), "--out", str(out / "runs"), "tune", str(cfg)]))
            codes.append(cli.main(["eval", str(out / "runs")]))
            codes.append(cli.main(["eval", str(out / "runs")]))
            trees.append(_tree_bytes(out))
        csvs = [k for k in trees[0] if k.endswith("_trajectory.csv")]
        reports = [k for k in trees[0] if k.rsplit("/", 1)[-1] in ("results.json", "results.csv", "table.md")]
        differing = sorted(k for k in set(trees[0]) | set(trees[1]) if trees[0].get(k) != trees[1].get(k))
    ok = not differing and codes.count(0) == len(codes) and csvs and len(reports) == 3
    return record(10, ok, f"two full synth/tune/eval runs (1 and 2 workers): {len(trees[0])} files, "
                          f"{len(csvs)} trajectory CSVs, {len(reports)} reports, byte-identical: {not differing} "
                          f"{differing[:5] or ''}; exit codes {sorted(set(codes))}")


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 11)}


# ---------------------------------------------------------------------------
# pytest entry points

@pytest.mark.parametrize("n", [1, 2, 3, 4, 9, 10])
def test_criterion_fast(n):
    assert CRITERIA[n](), REPORT[n][1]


@pytest.mark.slow
@pytest.mark.parametrize("n", [5, 6, 7, 8])
def test_criterion_experiment(n):
    assert CRITERIA[n](), REPORT[n][1]


if __name__ == "__main__":
    import sys

    wanted = [int(a) for a in sys.argv[1:]] or list(CRITERIA)
    for n in wanted:
        CRITERIA[n]()
        print(report_lines()[[k for k in sorted(REPORT)].index(n)], flush=True)
    sys.exit(0 if all(REPORT[n][0] for n in wanted) else 1)
