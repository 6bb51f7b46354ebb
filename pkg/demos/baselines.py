"""ST-SSAD against random augmentation baselines on the CutDiff tasks.

Usage: python3 demos/baselines.py [n_seeds]

Runs ST-SSAD, the first-order ablation and the static and dynamic random
baselines on the six recovery tasks and prints the comparison table with
one-sided Wilcoxon p-values. Five seeds take roughly an hour on one core.
"""

import sys

from stssad import evaluation, experiments

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
methods = ["st_ssad", "fo", "rs_cutdiff", "rd_cutdiff"]
rows = []
for seed in range(n_seeds):
    for spec in experiments.cutdiff_recovery_specs(seed):
        for m in methods:
            cell = experiments.run_cell(spec, m)
            rows.append(cell.row())
            print("%-18s %-11s seed %d  AUC %.3f" % (cell.task, m, seed, cell.auc), flush=True)

print()
print(evaluation.render_markdown(evaluation.build_table(rows)))
