"""Detector: MLP encoder with a logistic head, BCE training loss and GDE scorer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rawio
from .tensor import (
    Tensor,
    as_tensor,
    concat_rows,
    grad,
    matmul,
    no_grad,
    relu,
    reshape,
    slice_rows,
    softplus,
)

HIDDEN = (64, 64)
EMBED_DIM = 16
SHRINKAGE = 0.1
EIG_FLOOR = 1e-6
# pixels live in [0, 1]; centring the flattened input keeps the first layer well conditioned
INPUT_SHIFT = 0.5


class DetectorError(RuntimeError):
    pass


@dataclass
class EncoderParams:
    """Weights ``[W1, b1, ..., Wk, bk, W_head, b_head]``.

    The last pair is the logistic head mapping an embedding to one logit.
    """

    tensors: list[Tensor]

    @property
    def layers(self) -> list[tuple[Tensor, Tensor]]:
        t = self.tensors[:-2]
        return [(t[i], t[i + 1]) for i in range(0, len(t), 2)]

    @property
    def head(self) -> tuple[Tensor, Tensor]:
        return self.tensors[-2], self.tensors[-1]

    @property
    def input_dim(self) -> int:
        return self.tensors[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.tensors[-2].shape[0]

    def detach(self) -> "EncoderParams":
        return EncoderParams([t.detach() for t in self.tensors])

    def leaves(self) -> "EncoderParams":
        """Copy whose tensors are fresh differentiable leaves."""
        return EncoderParams([Tensor._wrap(t.data, requires_grad=True) for t in self.tensors])

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors]

    def layer_names(self) -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names += [f"layer{i + 1}.weight", f"layer{i + 1}.bias"]
        return names + ["head.weight", "head.bias"]


def init_params(input_dim: int, rng: np.random.Generator, hidden: Sequence[int] = HIDDEN,
                embed_dim: int = EMBED_DIM) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    dims = [input_dim, *hidden, embed_dim, 1]
    tensors = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        tensors.append(Tensor(np.zeros(fan_out)))
    return EncoderParams(tensors)


def _flatten(params: EncoderParams, x) -> Tensor:
    x = as_tensor(x)
    n = x.shape[0]
    flat = reshape(x, (n, -1)) if x.ndim != 2 else x
    if flat.shape[1] != params.input_dim:
        raise DetectorError(
            f"encoder expects inputs of {params.input_dim} values, got {flat.shape[1]} (batch shape {x.shape})"
        )
    return flat - INPUT_SHIFT


def encode(params: EncoderParams, x) -> Tensor:
    """Embeddings ``(N, h)`` of a batch of images (or already flattened rows)."""
    h = _flatten(params, x)
    layers = params.layers
    for i, (W, b) in enumerate(layers):
        h = matmul(h, W) + b
        if i < len(layers) - 1:
            h = relu(h)
    return h


def head_logits(params: EncoderParams, z: Tensor) -> Tensor:
    W, b = params.head
    return reshape(matmul(z, W) + b, (z.shape[0],))


def bce_from_logits(logits_inlier: Tensor, logits_aug: Tensor) -> Tensor:
    # -log(1 - sigmoid(l)) = softplus(l); -log(sigmoid(l)) = softplus(-l)
    return concat_rows([softplus(logits_inlier), softplus(-logits_aug)]).mean()


def bce_train_loss(params: EncoderParams, x_inlier, x_aug) -> Tensor:
    """Mean binary cross entropy separating inliers (label 0) from augmented data (label 1)."""
    x_inlier, x_aug = as_tensor(x_inlier), as_tensor(x_aug)
    if x_inlier.shape[0] == 0 or x_aug.shape[0] == 0:
        raise DetectorError("bce_train_loss needs non-empty inlier and augmented batches")
    n = x_inlier.shape[0]
    z = encode(params, concat_rows([x_inlier, x_aug]))
    logits = head_logits(params, z)
    return bce_from_logits(slice_rows(logits, 0, n), slice_rows(logits, n, logits.shape[0]))


def gradient_step(params: EncoderParams, loss: Tensor, alpha: float, create_graph: bool = False) -> EncoderParams:
    """``theta - alpha * grad_theta(loss)``; differentiable in everything upstream when ``create_graph``."""
    grads = grad(loss, params.tensors, create_graph=create_graph)
    for name, g in zip(params.layer_names(), grads):
        if not np.all(np.isfinite(g.data)):
            raise DetectorError(f"non-finite gradient in {name}")
    return EncoderParams([p - g * alpha for p, g in zip(params.tensors, grads)])


def train_step(params: EncoderParams, x_inlier, aug_fn: Callable, a, alpha: float,
               create_graph: bool = False) -> tuple[EncoderParams, float]:
    """One full-batch gradient step on the BCE loss with pseudo anomalies ``aug_fn(x_inlier, a)``.

    Returns the new parameters and the loss at the old parameters. With
    ``create_graph`` the new parameters stay a differentiable function of ``a``.
    """
    if alpha < 0:
        raise DetectorError(f"step size must be non-negative, got {alpha}")
    if alpha == 0:
        loss = bce_train_loss(params, x_inlier, aug_fn(x_inlier, a))
        return params, loss.item()
    if not all(t.requires_grad for t in params.tensors):
        params = params.leaves()
    loss = bce_train_loss(params, x_inlier, aug_fn(x_inlier, a))
    new = gradient_step(params, loss, alpha, create_graph=create_graph)
    if not create_graph:
        new = new.detach()
    return new, loss.item()


def save_checkpoint(path, params: EncoderParams) -> None:
    rawio.save_arrays(path, params.arrays())


def load_checkpoint(path) -> EncoderParams:
    arrays = rawio.load_arrays(path)
    if len(arrays) < 4 or len(arrays) % 2:
        raise rawio.FormatError(f"{path}: expected weight/bias pairs, got {len(arrays)} records")
    for i in range(0, len(arrays) - 2, 2):
        W, b = arrays[i], arrays[i + 1]
        nxt = arrays[i + 2]
        if W.ndim != 2 or b.shape != (W.shape[1],) or nxt.shape[0] != W.shape[1]:
            raise rawio.FormatError(f"{path}: layer {i // 2 + 1} shapes do not chain")
    return EncoderParams([Tensor(a) for a in arrays])


# ---------------------------------------------------------------------------
# Gaussian density estimator

@dataclass
class GdeModel:
    mean: np.ndarray
    cov: np.ndarray
    precision: np.ndarray
    log_det: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gde(z, shrinkage: float = SHRINKAGE, floor: float = EIG_FLOOR) -> GdeModel:
    """Gaussian fit with sample covariance shrunk towards ``tr(S)/h * I`` and floored eigenvalues."""
    z = np.asarray(as_tensor(z).data, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DetectorError(f"fit_gde needs at least 2 rows, got shape {z.shape}")
    h = z.shape[1]
    mu = z.mean(axis=0)
    zc = z - mu
    sample = zc.T @ zc / (z.shape[0] - 1)
    cov = (1 - shrinkage) * sample + shrinkage * np.trace(sample) / h * np.eye(h)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < floor:
        evals = np.maximum(evals, floor)
        cov = (evecs * evals) @ evecs.T
        cov = 0.5 * (cov + cov.T)
    precision = (evecs / evals) @ evecs.T
    precision = 0.5 * (precision + precision.T)
    return GdeModel(mu, cov, precision, float(np.sum(np.log(evals))))


def anomaly_score(z, gde: GdeModel) -> np.ndarray:
    """Negative log likelihood of each row of ``z`` (a single vector gives a 0-d array)."""
    z = np.asarray(as_tensor(z).data, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    d = z - gde.mean
    maha = np.einsum("ij,jk,ik->i", d, gde.precision, d)
    nll = 0.5 * maha + 0.5 * gde.log_det + 0.5 * gde.dim * np.log(2 * np.pi)
    return nll[0] if single else nll


def display_scores(scores) -> np.ndarray:
    """Shift scores so the smallest is zero (rankings and AUC are unchanged)."""
    scores = np.asarray(scores, dtype=np.float64)
    return scores - scores.min() if scores.size else scores


def score_variance(scores) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size < 2:
        raise DetectorError("score variance needs at least 2 test scores")
    return float(np.var(scores, ddof=1))


def score_images(params: EncoderParams, x_train, x_test) -> np.ndarray:
    """Fit the GDE on training embeddings and score the test images."""
    with no_grad():
        z_trn = encode(params, x_train).data
        z_test = encode(params, x_test).data
    return anomaly_score(z_test, fit_gde(z_trn))
