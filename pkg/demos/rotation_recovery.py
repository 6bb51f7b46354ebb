"""Learn the rotation angle that turns inliers into the test anomalies.

Usage: python3 demos/rotation_recovery.py [seed]

The anomalies are glyph textures rotated by 180 degrees. Each of the four
starting angles is tuned separately, and the run whose detector spreads the
test scores most is kept.
"""

import sys

import numpy as np

from stssad import evaluation, experiments

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
spec = experiments.rotation_recovery_spec(seed)
cell = experiments.run_cell(spec, "st_ssad")

for r in cell.runs:
    _, auc = evaluation.evaluate_run(r, experiments.datagen.build_testbed(spec))
    print("start %5.1f deg -> %5.1f deg, S = %.3g, AUC %.3f%s"
          % (np.degrees(r.init.values[0]), np.degrees(r.final_a.values[0]), r.score_var, auc,
             "  <- selected" if r.selected else ""))
err = np.degrees(experiments.angular_distance(cell.selected.final_a.values[0], np.pi))
print("selected angle is %.1f deg away from 180, AUC %.3f" % (err, cell.auc))
