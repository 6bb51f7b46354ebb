"""Unsupervised validation losses on embedding sets.

The main loss compares test embeddings with the means of the training and
augmented embeddings after a joint normalisation that fixes the total pairwise
squared distance (TPSD) of all rows to ``2 N**2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    concat_rows,
    exp,
    l2norm_rows,
    matmul,
    reshape,
    slice_rows,
    sqrt,
    square,
    transpose,
)

PARTS = ("trn", "aug", "test")
NORM_EPS = 1e-12


class CollapsedEmbeddingsError(ValueError):
    """All embedding rows coincide, so the normalisation is undefined."""


@dataclass
class EmbeddingBatch:
    """Rows of ``Z`` stacked as training, augmented, then test embeddings."""

    rows: Tensor
    counts: tuple[int, int, int]

    @classmethod
    def from_parts(cls, z_trn, z_aug, z_test) -> "EmbeddingBatch":
        parts = [as_tensor(z) for z in (z_trn, z_aug, z_test)]
        return cls(concat_rows(parts), tuple(p.shape[0] for p in parts))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def partition(self) -> np.ndarray:
        return np.repeat(np.array(PARTS), self.counts)

    def part(self, name: str) -> Tensor:
        i = PARTS.index(name)
        start = sum(self.counts[:i])
        return slice_rows(self.rows, start, start + self.counts[i])


@dataclass
class NormalizedEmbeddings(EmbeddingBatch):
    centroid: np.ndarray = None
    scale: float = 1.0


def _as_matrix(z) -> Tensor:
    z = as_tensor(z)
    return reshape(z, (z.shape[0], 1)) if z.ndim == 1 else z


def tpsd(z) -> Tensor:
    """Total pairwise squared distance over ordered pairs, via ``2N * sum ||z_i - mean||^2``."""
    z = _as_matrix(z)
    n = z.shape[0]
    centred = z - z.mean(axis=0, keepdims=True)
    return square(centred).sum() * (2.0 * n)


def normalize_tpsd(batch: EmbeddingBatch) -> NormalizedEmbeddings:
    """Centre all rows jointly and rescale so that ``||Z'||_F**2 = N``."""
    z = _as_matrix(batch.rows)
    n = z.shape[0]
    centroid = z.mean(axis=0, keepdims=True)
    centred = z - centroid
    fro = sqrt(square(centred).sum())
    if not fro.item() > 0:
        raise CollapsedEmbeddingsError("all embeddings are identical; cannot normalise")
    scaled = centred * (np.sqrt(n) / fro)
    return NormalizedEmbeddings(scaled, batch.counts, centroid=centroid.data.reshape(-1),
                                scale=float(np.sqrt(n) / fro.item()))


def mean_distance_loss(normalized: EmbeddingBatch) -> Tensor:
    """Half the summed distances of each test row to the training and augmented means,
    averaged over test rows.

    Distances are smoothed as ``sqrt(||d||^2 + 1e-12)``.
    """
    if min(normalized.counts) == 0:
        raise ValueError(f"every partition must be non-empty, got counts {normalized.counts}")
    trn = _as_matrix(normalized.part("trn"))
    aug = _as_matrix(normalized.part("aug"))
    test = _as_matrix(normalized.part("test"))
    to_trn = l2norm_rows(test - trn.mean(axis=0, keepdims=True), NORM_EPS)
    to_aug = l2norm_rows(test - aug.mean(axis=0, keepdims=True), NORM_EPS)
    return (to_trn + to_aug).mean() * 0.5


def validation_loss(z_trn, z_aug, z_test) -> Tensor:
    """Normalise jointly, then apply :func:`mean_distance_loss`."""
    return mean_distance_loss(normalize_tpsd(EmbeddingBatch.from_parts(z_trn, z_aug, z_test)))


def appendix_oracle(u1: float, u2: float) -> float:
    """Closed-form loss of the scalar configuration trn={0}, aug={2}, test={u1, u2 + 2}."""
    num = abs(u1) + abs(u1 - 2) + abs(u2) + abs(u2 + 2)
    den = np.sqrt(3 * u1**2 + 3 * u2**2 - 8 * u1 + 8 * u2 - 2 * u1 * u2 + 16)
    return float(num / den)


def scalar_configuration(u1, u2) -> EmbeddingBatch:
    """The four-point scalar batch matching :func:`appendix_oracle`."""
    return EmbeddingBatch.from_parts(Tensor([[0.0]]), Tensor([[2.0]]),
                                     concat_rows([reshape(as_tensor(u1), (1, 1)),
                                                  reshape(as_tensor(u2) + 2.0, (1, 1))]))


# ---------------------------------------------------------------------------
# MMD ablation

def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    na = reshape(square(a).sum(axis=1), (a.shape[0], 1))
    nb = reshape(square(b).sum(axis=1), (1, b.shape[0]))
    return na + nb - matmul(a, transpose(b)) * 2.0


def median_bandwidth(za, zb) -> float:
    """Median distance over distinct pairs of the union of both sets."""
    u = np.concatenate([_as_matrix(za).data, _as_matrix(zb).data], axis=0)
    if u.shape[0] < 2:
        return 1.0
    d2 = np.sum((u[:, None, :] - u[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(u.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def mmd(za, zb, bandwidth="median") -> Tensor:
    """Biased (V-statistic) squared MMD with a Gaussian kernel.

    ``bandwidth="median"`` uses the median heuristic, held constant for differentiation.
    """
    za, zb = _as_matrix(za), _as_matrix(zb)
    if za.shape[0] == 0 or zb.shape[0] == 0:
        raise ValueError("mmd needs two non-empty sets")
    sigma = median_bandwidth(za, zb) if bandwidth == "median" else float(bandwidth)
    scale = -1.0 / (2.0 * sigma * sigma)
    kaa = exp(_sq_dists(za, za) * scale).mean()
    kbb = exp(_sq_dists(zb, zb) * scale).mean()
    kab = exp(_sq_dists(za, zb) * scale).mean()
    return kaa + kbb - kab * 2.0


def mmd_loss(z_trn, z_aug, z_test, normalize: bool = True) -> Tensor:
    """MMD between the training-plus-augmented set and the test set."""
    batch = EmbeddingBatch.from_parts(z_trn, z_aug, z_test)
    if normalize:
        batch = normalize_tpsd(batch)
    n_ref = batch.counts[0] + batch.counts[1]
    return mmd(slice_rows(batch.rows, 0, n_ref), slice_rows(batch.rows, n_ref, batch.n))


VAL_LOSSES = {
    "mean_distance": validation_loss,
    "mmd_normalized": lambda a, b, c: mmd_loss(a, b, c, normalize=True),
    "mmd_raw": lambda a, b, c: mmd_loss(a, b, c, normalize=False),
}
