"""Augmentation functions.

``cutdiff`` and ``rotate`` are differentiable in both the image and the
hyperparameters; ``cutout`` and ``cutpaste`` are plain numpy and only serve the
random-selection baselines.

Images are ``(m, m, c)`` arrays, batches are ``(N, m, m, c)``.

Two coordinate frames are in use and must not be mixed:

* CutDiff grid: ``g_ij = (i/m, j/m)`` for ``i, j = 1..m`` (row, column).
* Rotation grid: centred, normalised coordinates in ``[-1, 1]`` with corners
  aligned to the outer pixel centres. Grids store ``(row, col)`` pairs; the
  rotation matrix acts on Cartesian ``(col, row)`` pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    clamp01,
    concat_rows,
    cos,
    exp,
    gather,
    reshape,
    sin,
    slice_rows,
)

EPS = 1e-6
KINDS = ("cutdiff", "rotation", "cutout", "cutpaste")
MIN_DIAG = 1e-5


class AugmentationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# hyperparameters

_DEFAULT_BOUNDS = {
    # a = (L00, L10, L11) of the lower-triangular patch factor
    "cutdiff": (np.array([MIN_DIAG, -1.0, MIN_DIAG]), np.array([1.0, 1.0, 1.0])),
    "rotation": (np.array([0.0]), np.array([2 * np.pi])),
    "cutout": (np.array([0.02]), np.array([0.15])),
    "cutpaste": (np.array([0.02, 0.3]), np.array([0.15, 3.3])),
}


@dataclass
class AugParams:
    """Hyperparameter vector ``values`` of an augmentation ``kind`` with its box domain."""

    kind: str
    values: np.ndarray
    lower: np.ndarray = field(default=None)
    upper: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentationError(f"unknown augmentation kind {self.kind!r}")
        self.values = np.array(self.values, dtype=np.float64).reshape(-1)
        lo, hi = _DEFAULT_BOUNDS[self.kind]
        self.lower = lo.copy() if self.lower is None else np.asarray(self.lower, dtype=np.float64)
        self.upper = hi.copy() if self.upper is None else np.asarray(self.upper, dtype=np.float64)
        if self.values.shape != self.lower.shape:
            raise AugmentationError(
                f"{self.kind} expects {self.lower.size} values, got {self.values.size}"
            )

    def project(self) -> "AugParams":
        """Map ``values`` back into the domain (clip, or wrap for angles)."""
        if self.kind == "rotation":
            vals = np.mod(self.values, 2 * np.pi)
        else:
            vals = np.clip(self.values, self.lower, self.upper)
        return AugParams(self.kind, vals, self.lower, self.upper)

    def contains(self, tol: float = 0.0) -> bool:
        if self.kind == "rotation":
            return bool(np.all((self.values >= 0) & (self.values < 2 * np.pi)))
        return bool(np.all(self.values >= self.lower - tol) and np.all(self.values <= self.upper + tol))

    def with_values(self, values) -> "AugParams":
        return AugParams(self.kind, values, self.lower, self.upper)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "values": self.values.tolist()}
        if self.kind == "cutdiff":
            g, s, r = decompose_L(lower_matrix(self.values))
            d.update(angle=g, size=s, ratio=r)
        elif self.kind == "rotation":
            d.update(degrees=float(np.degrees(self.values[0])))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugParams":
        return cls(d["kind"], d["values"])


def cutdiff_params(size: float, ratio: float = 1.0, angle: float = 0.0) -> AugParams:
    """CutDiff hyperparameters for a patch of given size, ratio and angle.

    ``L = R(angle) S(size, ratio)`` only enters through ``L L^T``, so the
    stored factor is the equivalent lower-triangular Cholesky factor.
    """
    return AugParams("cutdiff", lower_vector(recompose_L(angle, size, ratio)))


def rotation_params(angle: float) -> AugParams:
    return AugParams("rotation", [angle]).project()


def sample_params(kind: str, rng: np.random.Generator) -> AugParams:
    """Draw hyperparameters uniformly from the admissible box of ``kind``.

    Used by the random-selection baselines.
    """
    if kind == "cutdiff":
        lo, hi = _DEFAULT_BOUNDS["cutdiff"]
        return AugParams("cutdiff", rng.uniform(lo, hi))
    if kind == "rotation":
        return rotation_params(rng.uniform(0.0, 2 * np.pi))
    if kind == "cutout":
        return AugParams("cutout", [rng.uniform(0.02, 0.15)])
    if kind == "cutpaste":
        aspect = float(np.exp(rng.uniform(np.log(0.3), np.log(3.3))))
        return AugParams("cutpaste", [rng.uniform(0.02, 0.15), aspect])
    raise AugmentationError(f"unknown augmentation kind {kind!r}")


# ---------------------------------------------------------------------------
# patch shape algebra

def lower_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    return np.array([[a[0], 0.0], [a[1], a[2]]])


def lower_vector(L: np.ndarray) -> np.ndarray:
    """Lower-triangular factor (positive diagonal) with the same ``L L^T`` as ``L``."""
    C = np.asarray(L) @ np.asarray(L).T
    chol = np.linalg.cholesky(C)
    return np.array([chol[0, 0], chol[1, 0], chol[1, 1]])


def rotation_matrix(g: float) -> np.ndarray:
    return np.array([[np.cos(g), -np.sin(g)], [np.sin(g), np.cos(g)]])


def recompose_L(g: float, s: float, r: float) -> np.ndarray:
    return rotation_matrix(g) @ np.diag([s / r, s * r])


def decompose_L(L) -> tuple[float, float, float]:
    """Angle, size and ratio ``(g, s, r)`` of a patch factor.

    When the columns of ``L`` are orthogonal this inverts ``L = R(g) S(s, r)``
    exactly. Otherwise it returns the decomposition of the patch with the same
    ``L L^T`` (the only thing CutDiff depends on), keeping the axis closest to
    the first column of ``L`` as the ``s / r`` axis.
    """
    if isinstance(L, AugParams):
        L = L.values
    L = np.asarray(L, dtype=np.float64)
    if L.shape == (3,):
        L = lower_matrix(L)
    if np.any(np.linalg.norm(L, axis=0) == 0):
        raise AugmentationError(f"degenerate patch factor (zero column): {L.tolist()}")
    evals, evecs = np.linalg.eigh(L @ L.T)
    col = L[:, 0]
    k = int(np.argmax(np.abs(evecs.T @ col)))
    axis = evecs[:, k]
    if axis @ col < 0:
        axis = -axis
    first = np.sqrt(max(evals[k], 0.0))  # s / r
    second = np.sqrt(max(evals[1 - k], 0.0))  # s * r
    if first == 0 or second == 0:
        raise AugmentationError(f"singular patch factor: {L.tolist()}")
    g = float(np.arctan2(axis[1], axis[0]))
    s = float(np.sqrt(first * second))
    r = float(np.sqrt(second / first))
    return g, s, r


def patch_size(a) -> float:
    """Size ``s`` of a CutDiff patch; ``s**2 = |det L|``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    return float(np.sqrt(abs(a[0] * a[2])))


# ---------------------------------------------------------------------------
# CutDiff

def cutdiff_grid(m: int) -> np.ndarray:
    idx = np.arange(1, m + 1) / m
    rows, cols = np.meshgrid(idx, idx, indexing="ij")
    return np.stack([rows, cols], axis=-1)


def sample_centers(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(n, 2))


def _as_batch(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise AugmentationError(f"expected an image (m, m, c) or batch (N, m, m, c), got {x.shape}")
    return x, False


def patch_matrix(a, mu: np.ndarray, m: int) -> Tensor:
    """Patch intensities ``p_ij`` of shape ``(N, m, m)`` for centres ``mu`` of shape ``(N, 2)``."""
    a = as_tensor(a)
    if a.shape != (3,):
        raise AugmentationError(f"cutdiff expects a in R^3, got shape {a.shape}")
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
    if np.any(mu < 0) or np.any(mu > 1):
        raise AugmentationError(f"patch centre outside [0, 1]^2: {mu[(mu < 0).any(1) | (mu > 1).any(1)][0]}")

    l00, l10, l11 = slice_rows(a, 0, 1), slice_rows(a, 1, 2), slice_rows(a, 2, 3)
    c00 = l00 * l00 + EPS
    c01 = l00 * l10
    c11 = l10 * l10 + l11 * l11 + EPS
    det = c00 * c11 - c01 * c01
    if not np.all(np.isfinite(det.data)) or det.item() <= 1e-300:
        raise AugmentationError(f"L L^T + eps I is singular for L = {lower_matrix(a.data).tolist()}")

    grid = cutdiff_grid(m)
    dr = grid[None, :, :, 0] - mu[:, 0, None, None]
    dc = grid[None, :, :, 1] - mu[:, 1, None, None]
    # (g - mu)^T C^{-1} (g - mu) with the adjugate inverse of C
    quad = (c11 * (dr * dr) - c01 * (2.0 * dr * dc) + c00 * (dc * dc)) / det
    return exp(-quad)


def cutdiff(x, a, mu) -> Tensor:
    """Subtract a smooth elliptical patch from each image and clamp to ``[0, 1]``.

    ``mu`` is either an array of centres (``(2,)`` or ``(N, 2)``) or a numpy
    ``Generator`` from which one centre per image is drawn.
    """
    xb, single = _as_batch(x)
    n, m = xb.shape[0], xb.shape[1]
    if isinstance(mu, np.random.Generator):
        mu = sample_centers(mu, n)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
    if mu.shape[0] == 1 and n > 1:
        mu = np.repeat(mu, n, axis=0)
    if mu.shape[0] != n:
        raise AugmentationError(f"got {mu.shape[0]} patch centres for {n} images")
    p = patch_matrix(a, mu, m)
    out = clamp01(xb - reshape(p, (n, m, m, 1)))
    return reshape(out, out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# Rotation

def identity_grid(m: int) -> np.ndarray:
    if m < 2:
        raise AugmentationError("affine grid needs m >= 2")
    v = np.linspace(-1.0, 1.0, m)
    rows, cols = np.meshgrid(v, v, indexing="ij")
    return np.stack([rows, cols], axis=-1)


def affine_grid(angle, m: int) -> Tensor:
    """Source coordinates ``(row, col)`` in ``[-1, 1]`` for a rotation by ``angle``.

    Each output location ``(x, y) = (col, row)`` is mapped through ``[R(angle) | 0]``.
    """
    angle = as_tensor(angle)
    base = identity_grid(m)
    y, x = base[..., 0], base[..., 1]
    c, s = cos(reshape(angle, (1,))), sin(reshape(angle, (1,)))
    src_x = c * x - s * y
    src_y = s * x + c * y
    stacked = concat_rows([reshape(src_y, (1, m, m)), reshape(src_x, (1, m, m))])
    # (2, m, m) -> (m, m, 2) without a general transpose primitive
    return _channels_last(stacked, m)


def _channels_last(t: Tensor, m: int) -> Tensor:
    idx = np.arange(2 * m * m).reshape(2, m, m).transpose(1, 2, 0)
    return gather(t, idx)


def _sample_pixels(xb: Tensor, rows: Tensor, cols: Tensor) -> Tensor:
    """Bilinear sampling of batch ``xb`` at fractional pixel positions, zero outside."""
    n, m, w, c = xb.shape
    H, W = rows.shape
    r0 = np.floor(rows.data)
    c0 = np.floor(cols.data)
    wr = rows - r0
    wc = cols - c0
    base = (np.arange(n) * (m * w * c))[:, None, None, None]
    chan = np.arange(c)[None, None, None, :]
    out = None
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri = (r0 + dr).astype(np.intp)
        ci = (c0 + dc).astype(np.intp)
        valid = (ri >= 0) & (ri < m) & (ci >= 0) & (ci < w)
        flat = np.where(valid, ri * (w * c) + ci * c, 0)
        idx = base + flat[None, :, :, None] + chan
        vals = gather(xb, idx)
        weight = (wr if dr else 1.0 - wr) * (wc if dc else 1.0 - wc)
        weight = reshape(weight * valid.astype(np.float64), (1, H, W, 1))
        term = vals * weight
        out = term if out is None else out + term
    return out


def bilinear_sample(x, coords) -> Tensor:
    """Sample image(s) at normalised ``(row, col)`` coordinates of shape ``(H, W, 2)``."""
    xb, single = _as_batch(x)
    coords = as_tensor(coords)
    m, w = xb.shape[1], xb.shape[2]
    H, W = coords.shape[0], coords.shape[1]
    flat = reshape(coords, (H * W, 2))
    rows = reshape(gather(flat, np.arange(H * W) * 2), (H, W))
    cols = reshape(gather(flat, np.arange(H * W) * 2 + 1), (H, W))
    rows = (rows + 1.0) * ((m - 1) / 2.0)
    cols = (cols + 1.0) * ((w - 1) / 2.0)
    out = _sample_pixels(xb, rows, cols)
    return reshape(out, out.shape[1:]) if single else out


def rotate(x, angle) -> Tensor:
    """Rotate image(s) about the centre by ``angle`` radians (bilinear, zero fill)."""
    xb, single = _as_batch(x)
    angle = as_tensor(angle)
    if not np.all(np.isfinite(angle.data)):
        raise AugmentationError(f"non-finite rotation angle {angle.data}")
    m = xb.shape[1]
    if xb.shape[2] != m:
        raise AugmentationError(f"rotation expects square images, got {xb.shape[1:3]}")
    # pixel-space form of affine_grid: exact at angle 0
    ctr = (m - 1) / 2.0
    rows_px, cols_px = np.meshgrid(np.arange(m, dtype=np.float64), np.arange(m, dtype=np.float64), indexing="ij")
    x0, y0 = cols_px - ctr, rows_px - ctr
    c, s = cos(reshape(angle, (1,))), sin(reshape(angle, (1,)))
    src_cols = c * x0 - s * y0 + ctr
    src_rows = s * x0 + c * y0 + ctr
    out = _sample_pixels(xb, src_rows, src_cols)
    return reshape(out, out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# CutOut / CutPaste (non-differentiable)

def _patch_dims(m: int, size_fraction: float, aspect_ratio: float = 1.0) -> tuple[int, int]:
    if not 0 < size_fraction <= 1:
        raise AugmentationError(f"size_fraction must lie in (0, 1], got {size_fraction}")
    area = size_fraction * m * m
    h = max(1, int(round(np.sqrt(area * aspect_ratio))))
    w = max(1, int(round(np.sqrt(area / aspect_ratio))))
    if h > m or w > m:
        raise AugmentationError(f"patch {h}x{w} does not fit in a {m}x{m} image")
    return h, w


def cutout(x, size_fraction: float, rng: np.random.Generator | None = None, top_left=None) -> np.ndarray:
    """Fill an axis-aligned square of area ``size_fraction * m**2`` with zeros."""
    x = np.array(x, dtype=np.float64)
    m = x.shape[0]
    h, w = _patch_dims(m, size_fraction)
    if top_left is None:
        top_left = (rng.integers(0, m - h + 1), rng.integers(0, m - w + 1))
    r, c = top_left
    x[r:r + h, c:c + w] = 0.0
    return x


def cutpaste(x, size_fraction: float, aspect_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Copy a rectangle to a different, uniformly drawn location of the same image."""
    x = np.array(x, dtype=np.float64)
    m = x.shape[0]
    h, w = _patch_dims(m, size_fraction, aspect_ratio)
    if h == m and w == m:
        raise AugmentationError("cutpaste patch covers the whole image; no distinct destination exists")
    src = (rng.integers(0, m - h + 1), rng.integers(0, m - w + 1))
    while True:
        dst = (rng.integers(0, m - h + 1), rng.integers(0, m - w + 1))
        if dst != src:
            break
    patch = x[src[0]:src[0] + h, src[1]:src[1] + w].copy()
    x[dst[0]:dst[0] + h, dst[1]:dst[1] + w] = patch
    return x


# ---------------------------------------------------------------------------
# batch application

def apply(params: AugParams, x, rng: np.random.Generator, a: Tensor | None = None, mu=None):
    """Apply ``params`` to a batch.

    For the differentiable kinds ``a`` may carry the hyperparameters as a
    recorded tensor; ``mu`` fixes the CutDiff centres (otherwise drawn from ``rng``).
    """
    if params.kind == "cutdiff":
        a = Tensor(params.values) if a is None else a
        return cutdiff(x, a, rng if mu is None else mu)
    if params.kind == "rotation":
        a = Tensor(params.values) if a is None else a
        return rotate(x, a)
    xb = np.asarray(as_tensor(x).data)
    if params.kind == "cutout":
        return Tensor(np.stack([cutout(img, params.values[0], rng) for img in xb]))
    return Tensor(np.stack([cutpaste(img, params.values[0], params.values[1], rng) for img in xb]))
