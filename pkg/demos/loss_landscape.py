"""Validation loss landscape of the four-point scalar configuration.

Training embedding at 0, augmented embedding at 2, test embeddings at u1 and
u2 + 2. The loss is smallest when the augmented and training points line up
with the two test points (u = 0), and the negative gradient points there from
almost everywhere on the grid.
"""

import numpy as np

from stssad import valloss
from stssad.tensor import Tensor, grad, reshape, slice_rows, tape_scope


def loss_at(u):
    col = reshape(u, (2, 1))
    batch = valloss.scalar_configuration(slice_rows(col, 0, 1), slice_rows(col, 1, 2))
    return valloss.mean_distance_loss(valloss.normalize_tpsd(batch))


axis = np.linspace(-1, 1, 21)
values = np.array([[valloss.appendix_oracle(u1, u2) for u2 in axis] for u1 in axis])
print("loss at the optimum:", loss_at(Tensor([0.0, 0.0])).item())
print("loss range over the grid: %.4f .. %.4f" % (values.min(), values.max()))

# arrow map of the descent direction, rows are u1 (top = -1), columns u2
arrows = {(1, 0): "v", (-1, 0): "^", (0, 1): ">", (0, -1): "<", (0, 0): "."}
toward = 0
for u1 in axis[::2]:
    line = ""
    for u2 in axis[::2]:
        if u1 == 0 and u2 == 0:
            line += "o "
            continue
        with tape_scope():
            u = Tensor([u1, u2], requires_grad=True)
            (g,) = grad(loss_at(u), [u])
        d = -g.data
        toward += np.dot(d, -np.array([u1, u2])) > 0
        k = int(np.argmax(np.abs(d)))
        step = [0, 0]
        step[k] = int(np.sign(d[k]))
        line += arrows[tuple(step)] + " "
    print(line)
print("descent points toward the optimum at %d of %d grid points" % (toward, len(axis[::2]) ** 2 - 1))
