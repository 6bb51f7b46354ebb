"""Learn the CutDiff patch shape on one synthetic task.

Usage: python3 demos/cutdiff_recovery.py [size] [ratio] [seed]

Prints the trajectory of every starting point, which run the score variance
selects, and the test AUC of its detector. Augmentation samples before and
after tuning are written to demo_out/.
"""

import sys
from pathlib import Path

import numpy as np

from stssad import augment, datagen, evaluation, experiments

size = float(sys.argv[1]) if len(sys.argv) > 1 else 0.08
ratio = float(sys.argv[2]) if len(sys.argv) > 2 else 2.0
seed = int(sys.argv[3]) if len(sys.argv) > 3 else 0

spec = datagen.SynthSpec(seed=seed, size=size, ratio=ratio, **experiments.RECOVERY_DATA)
ds = datagen.build_testbed(spec)
print("task", spec.task_name, "true a* =", np.round(spec.true_params.values, 4))

best, runs = experiments.run_method("st_ssad", ds, seed, experiments.RECOVERY_TUNER["cutdiff"])
for r in runs:
    g, s, rr = augment.decompose_L(r.final_a)
    print("run %d: start size %.0e -> size %.4f ratio %.2f after %3d iterations, S = %.3g%s"
          % (r.index, augment.patch_size(r.init.values), s, max(rr, 1 / rr), len(r.trajectory),
             r.score_var, "  <- selected" if r.selected else ""))

_, auc = evaluation.evaluate_run(best, ds)
print("learned size %.4f (true %.2f), test AUC %.3f" % (experiments.learned_size(best), size, auc))

out = Path("demo_out")
out.mkdir(exist_ok=True)
mu = np.array([[0.5, 0.5]])
for name, p in (("before", best.init), ("after", best.final_a), ("true", spec.true_params)):
    img = augment.cutdiff(ds.train[0], p.values, mu).data
    datagen.save_png(out / ("cutdiff_%s.png" % name), img)
print("wrote", sorted(str(f) for f in out.glob("cutdiff_*.png")))
