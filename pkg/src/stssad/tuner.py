"""Alternating detector / augmentation-hyperparameter optimisation.

Each iteration takes one differentiable training step
``theta' = theta - alpha * grad_theta L_trn(theta, a)``, embeds training,
augmented and test data with ``theta'``, and updates ``a`` by gradient descent
on the validation loss. In ``second_order`` mode the gradient flows through
``theta'``; in ``first_order`` mode ``theta'`` is held constant. The random
baselines draw ``a`` once (``random_static``) or every epoch (``random_dynamic``).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import augment
from .augment import AugParams
from .datagen import UnlabeledData
from .detector import (
    DetectorError,
    EncoderParams,
    bce_train_loss,
    encode,
    gradient_step,
    init_params,
    score_images,
    score_variance,
)
from .tensor import Tensor, concat_rows, grad, no_grad, slice_rows, square, tape_scope
from .valloss import VAL_LOSSES, CollapsedEmbeddingsError

log = logging.getLogger(__name__)

MODES = ("second_order", "first_order", "random_static", "random_dynamic")
CUTDIFF_INIT_SIZES = (1e-4, 1e-3, 1e-2, 1e-1)
ROTATION_INIT_DEGREES = (45.0, 135.0, 225.0, 315.0)
REL_IMPROVEMENT = 1e-5
TRAJECTORY_A_COLUMNS = 3
TRAJECTORY_HEADER = ["t", "a0", "a1", "a2", "l_trn", "l_val", "l_sum"]


class TunerError(RuntimeError):
    pass


def default_inits(kind: str) -> list[AugParams]:
    if kind == "cutdiff":
        return [augment.AugParams("cutdiff", [s, 0.0, s]) for s in CUTDIFF_INIT_SIZES]
    if kind == "rotation":
        return [augment.rotation_params(np.radians(d)) for d in ROTATION_INIT_DEGREES]
    raise TunerError(f"no initialisation grid for {kind!r}; use a random mode")


@dataclass
class TunerConfig:
    alpha: float = 1e-2
    beta: float = 1e-2
    T: int = 300
    gamma: float = 1.0
    warm_epochs: int = 20
    theta_updates_per_iter: int = 1
    mode: str = "second_order"
    val_loss_kind: str = "mean_distance"
    aug_kind: str = "cutdiff"
    init_list: list[AugParams] | None = None
    patience: int = 20
    seed: int = 0
    warm_alpha: float | None = None
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise TunerError(f"unknown mode {self.mode!r}")
        if self.val_loss_kind not in VAL_LOSSES:
            raise TunerError(f"unknown validation loss {self.val_loss_kind!r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise TunerError("step sizes must be positive")
        if self.T < 1 or self.gamma <= 0 or self.theta_updates_per_iter < 1:
            raise TunerError("need T >= 1, gamma > 0 and at least one theta update per iteration")
        if self.init_list is None and self.mode in ("second_order", "first_order"):
            self.init_list = default_inits(self.aug_kind)
        if self.mode in ("second_order", "first_order") and not self.init_list:
            raise TunerError("init_list must be non-empty")
        if self.mode in ("second_order", "first_order") and self.aug_kind not in ("cutdiff", "rotation"):
            raise TunerError(f"{self.aug_kind} is not differentiable; use a random mode")
        self.hidden = tuple(self.hidden)

    @property
    def differentiable(self) -> bool:
        return self.mode in ("second_order", "first_order")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "init_list"}
        d["hidden"] = list(self.hidden)
        d["init_list"] = None if self.init_list is None else [p.to_dict() for p in self.init_list]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TunerConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TunerError(f"unknown tuner fields: {sorted(unknown)}")
        if d.get("init_list") is not None:
            d["init_list"] = [AugParams.from_dict(p) for p in d["init_list"]]
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TunerRun:
    index: int
    init: AugParams
    trajectory: list[dict] = field(default_factory=list)
    final_a: AugParams | None = None
    params: EncoderParams | None = None
    selected: bool = False
    aborted: str | None = None
    score_var: float | None = None

    @property
    def final_summed_loss(self) -> float:
        return self.trajectory[-1]["l_sum"] if self.trajectory else float("inf")

    def trajectory_csv(self) -> str:
        """CSV with a fixed header; kinds with fewer than three hyperparameters leave trailing ``a`` cells empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for row in self.trajectory:
            a = [repr(float(v)) for v in row["a"]]
            w.writerow([row["t"]] + a + [""] * (TRAJECTORY_A_COLUMNS - len(a))
                       + [repr(float(row[k])) for k in ("l_trn", "l_val", "l_sum")])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# building blocks

def stopping_check(history, patience: int) -> bool:
    """True once the summed loss has not improved by ``1e-5`` relative for ``patience`` iterations."""
    if not len(history):
        raise TunerError("stopping_check needs a non-empty history")
    best, best_i = history[0], 0
    for i, v in enumerate(history[1:], start=1):
        if v < best - REL_IMPROVEMENT * abs(best):
            best, best_i = v, i
    return len(history) - 1 - best_i >= patience


def _aug_sources(n_trn: int, gamma: float) -> np.ndarray:
    n_aug = max(1, int(round(gamma * n_trn)))
    return np.arange(n_aug) % n_trn


def make_aug_fn(kind: str, mu=None, rng: np.random.Generator | None = None) -> Callable:
    """``aug_fn(x, a)`` for a differentiable kind; CutDiff centres fixed by ``mu``."""
    if kind == "cutdiff":
        return lambda x, a: augment.cutdiff(x, a, mu if mu is not None else rng)
    if kind == "rotation":
        return lambda x, a: augment.rotate(x, a)
    raise TunerError(f"{kind} is not differentiable")


def embed_all(params: EncoderParams, x_trn, x_aug, x_test) -> tuple[Tensor, Tensor, Tensor]:
    n1, n2 = x_trn.shape[0], x_aug.shape[0]
    z = encode(params, concat_rows([x_trn, x_aug, x_test]))
    return slice_rows(z, 0, n1), slice_rows(z, n1, n1 + n2), slice_rows(z, n1 + n2, z.shape[0])


def inner_step(params: EncoderParams, x_trn, x_aug, alpha: float, create_graph: bool):
    """One training step; returns ``(theta', L_trn(theta))``."""
    if not all(t.requires_grad for t in params.tensors):
        params = params.leaves()
    loss = bce_train_loss(params, x_trn, x_aug)
    new = gradient_step(params, loss, alpha, create_graph=create_graph)
    return (new if create_graph else new.detach()), loss


def outer_objective(a_values, params: EncoderParams, x_trn, x_test, kind: str, alpha: float,
                    mu=None, val_loss_kind: str = "mean_distance", second_order: bool = True,
                    src_index=None):
    """Validation loss of ``a`` after one inner step from ``params``.

    Returns ``(L_val, L_trn, a_tensor, theta')``; ``L_val`` is differentiable in
    ``a_tensor`` (through ``theta'`` too when ``second_order``).
    """
    a = Tensor(np.asarray(a_values, dtype=np.float64), requires_grad=True)
    x_trn = x_trn if isinstance(x_trn, Tensor) else Tensor(x_trn)
    x_test = x_test if isinstance(x_test, Tensor) else Tensor(x_test)
    src = x_trn if src_index is None else Tensor(x_trn.data[src_index])
    aug_fn = make_aug_fn(kind, mu=mu)
    x_aug = aug_fn(src, a)
    new_params, l_trn = inner_step(params, x_trn, x_aug, alpha, create_graph=second_order)
    if not second_order:
        new_params = new_params.detach()
    z_trn, z_aug, z_test = embed_all(new_params, x_trn, x_aug, x_test)
    l_val = VAL_LOSSES[val_loss_kind](z_trn, z_aug, z_test)
    return l_val, l_trn, a, new_params


def hypergradient(a_values, params: EncoderParams, x_trn, x_test, kind: str = "cutdiff",
                  alpha: float = 1e-2, mu=None, val_loss_kind: str = "mean_distance", src_index=None):
    """Gradient over ``a`` of ``L_val(a, theta - alpha grad_theta L_trn(theta, a))``."""
    with tape_scope():
        l_val, l_trn, a, new_params = outer_objective(
            a_values, params, x_trn, x_test, kind, alpha, mu, val_loss_kind, True, src_index)
        (g,) = grad(l_val, [a])
        return _checked(g.data.copy(), l_val, l_trn), l_val.item(), l_trn.item(), new_params.detach()


def first_order_step(a_values, params: EncoderParams, x_trn, x_test, kind: str = "cutdiff",
                     alpha: float = 1e-2, mu=None, val_loss_kind: str = "mean_distance", src_index=None):
    """As :func:`hypergradient` but with ``theta'`` held constant."""
    with tape_scope():
        l_val, l_trn, a, new_params = outer_objective(
            a_values, params, x_trn, x_test, kind, alpha, mu, val_loss_kind, False, src_index)
        (g,) = grad(l_val, [a])
        return _checked(g.data.copy(), l_val, l_trn), l_val.item(), l_trn.item(), new_params.detach()


def bilevel_gradient(train_loss: Callable, val_loss: Callable, theta, a_values, alpha: float,
                     second_order: bool = True) -> np.ndarray:
    """Gradient over ``a`` of ``val_loss(theta - alpha grad train_loss(theta, a), a)`` for any model.

    ``theta`` is a list of arrays or tensors; both losses take ``(theta_list, a)``.
    With ``second_order=False`` the inner step is treated as a constant.
    """
    with tape_scope():
        a = Tensor(np.asarray(a_values, dtype=np.float64), requires_grad=True)
        theta = [Tensor(t.data if isinstance(t, Tensor) else t, requires_grad=True) for t in theta]
        l_trn = train_loss(theta, a)
        grads = grad(l_trn, theta, create_graph=second_order)
        new = [t - g * alpha for t, g in zip(theta, grads)]
        if not second_order:
            new = [t.detach() for t in new]
        l_val = val_loss(new, a)
        (g,) = grad(l_val, [a])
        return g.data.copy()


def scalar_toy_gradient(theta: float = 1.0, a: float = 0.0, alpha: float = 0.1, second_order: bool = True) -> float:
    """``L_trn = (theta - a)**2``, ``L_val = theta'**2``; closed form ``4 alpha theta'`` (second order) or 0."""
    g = bilevel_gradient(lambda th, av: square(th[0] - av).sum(),
                         lambda th, av: square(th[0]).sum(),
                         [np.array(float(theta))], float(a), alpha, second_order)
    return float(g)


def gradient_descent(loss_fn: Callable, a0, beta: float, T: int, project: Callable | None = None) -> list[tuple]:
    """Plain descent ``a <- a - beta grad loss_fn(a)``; returns ``[(a, loss), ...]`` including the start."""
    a = np.asarray(a0, dtype=np.float64).copy()
    history = []
    for _ in range(T):
        with tape_scope():
            at = Tensor(a, requires_grad=True)
            loss = loss_fn(at)
            (g,) = grad(loss, [at])
            history.append((a.copy(), loss.item()))
        a = a - beta * g.data
        if project is not None:
            a = project(a)
    with no_grad():
        history.append((a.copy(), loss_fn(Tensor(a)).item()))
    return history


def _checked(g: np.ndarray, l_val, l_trn) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise TunerError(f"non-finite hypergradient {g} (L_val={l_val.item()!r}, L_trn={l_trn.item()!r})")
    return g


def _augment_constant(params: AugParams, x: np.ndarray, rng: np.random.Generator, mu=None) -> Tensor:
    with no_grad():
        if params.kind == "cutdiff":
            return augment.cutdiff(x, params.values, mu if mu is not None else rng)
        return augment.apply(params, x, rng)


def plain_step(params: EncoderParams, x_trn: np.ndarray, a: AugParams, alpha: float,
               rng: np.random.Generator, src_index=None) -> tuple[EncoderParams, float]:
    src = x_trn if src_index is None else x_trn[src_index]
    with tape_scope():
        x_aug = _augment_constant(a, src, rng)
        new, loss = inner_step(params, Tensor(x_trn), x_aug, alpha, create_graph=False)
        return new, loss.item()


def warm_start(params: EncoderParams, x_trn: np.ndarray, a: AugParams, epochs: int, alpha: float,
               rng: np.random.Generator, src_index=None) -> EncoderParams:
    """``epochs`` plain training steps at fixed ``a``."""
    if epochs < 0:
        raise TunerError("warm start epochs must be non-negative")
    for _ in range(epochs):
        params, _ = plain_step(params, x_trn, a, alpha, rng, src_index)
    return params


def validation_value(params: EncoderParams, a: AugParams, x_trn, x_test, mu=None, rng=None,
                     val_loss_kind: str = "mean_distance", src_index=None) -> float:
    """``L_val`` at fixed ``(a, theta)`` without a training step."""
    src = x_trn if src_index is None else x_trn[src_index]
    with no_grad():
        x_aug = _augment_constant(a, src, rng, mu)
        z = embed_all(params, Tensor(x_trn), x_aug, Tensor(x_test))
        return VAL_LOSSES[val_loss_kind](*z).item()


# ---------------------------------------------------------------------------
# orchestration

def _run_rngs(seed: int, index: int):
    ss = np.random.SeedSequence([seed, index])
    init_ss, mu_ss, aug_ss = ss.spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(mu_ss), np.random.default_rng(aug_ss))


def tune_single(config: TunerConfig, data: UnlabeledData, init: AugParams | None = None,
                index: int = 0) -> TunerRun:
    """Run the alternating optimisation from one starting point."""
    init_rng, mu_rng, aug_rng = _run_rngs(config.seed, index)
    # same detector initialisation for every starting point of a seed
    params = init_params(int(np.prod(data.train.shape[1:])), np.random.default_rng([config.seed, 0x5EED]),
                         config.hidden, config.embed_dim)
    x_trn, x_test = np.asarray(data.train), np.asarray(data.test)
    src_index = _aug_sources(len(x_trn), config.gamma)
    if src_index.size == len(x_trn) and np.array_equal(src_index, np.arange(len(x_trn))):
        src_index = None
    n_aug = len(x_trn) if src_index is None else src_index.size

    if config.mode == "random_static" or config.mode == "random_dynamic":
        init = augment.sample_params(config.aug_kind, init_rng)
    elif init is None:
        raise TunerError("differentiable modes need an initial AugParams")
    a = init.project()
    run = TunerRun(index=index, init=a)
    warm_alpha = config.warm_alpha if config.warm_alpha is not None else config.alpha

    for _ in range(config.warm_epochs):
        if config.mode == "random_dynamic":
            a = augment.sample_params(config.aug_kind, init_rng)
        params, _ = plain_step(params, x_trn, a, warm_alpha, aug_rng, src_index)

    xt_trn, xt_test = Tensor(x_trn), Tensor(x_test)
    history = []
    for t in range(config.T):
        if config.mode == "random_dynamic":
            a = augment.sample_params(config.aug_kind, init_rng)
        for _ in range(config.theta_updates_per_iter - 1):
            params, _ = plain_step(params, x_trn, a, config.alpha, aug_rng, src_index)
        mu = augment.sample_centers(mu_rng, n_aug) if a.kind == "cutdiff" else None
        try:
            if config.differentiable:
                step = hypergradient if config.mode == "second_order" else first_order_step
                g, l_val, l_trn, params = step(a.values, params, xt_trn, xt_test, a.kind, config.alpha,
                                               mu, config.val_loss_kind, src_index)
                a_next = a.with_values(a.values - config.beta * g).project()
            else:
                params, l_trn, l_val = _random_iteration(params, a, x_trn, x_test, config, aug_rng, mu, src_index)
                a_next = a
        except (CollapsedEmbeddingsError, DetectorError, TunerError, FloatingPointError) as exc:
            run.aborted = f"iteration {t}: {exc}"
            log.warning("run %d aborted: %s", index, run.aborted)
            break
        if not a_next.contains():
            raise TunerError(f"projection failed: {a_next.values}")
        row = {"t": t, "a": a.values.copy(), "l_trn": l_trn, "l_val": l_val, "l_sum": l_trn + l_val}
        run.trajectory.append(row)
        history.append(row["l_sum"])
        a = a_next
        if stopping_check(history, config.patience):
            break

    run.final_a = a
    run.params = params.detach()
    return run


def _random_iteration(params, a, x_trn, x_test, config, aug_rng, mu, src_index):
    src = x_trn if src_index is None else x_trn[src_index]
    with tape_scope():
        x_aug = _augment_constant(a, src, aug_rng, mu)
        new, l_trn = inner_step(params, Tensor(x_trn), x_aug, config.alpha, create_graph=False)
        with no_grad():
            z = embed_all(new, Tensor(x_trn), x_aug, Tensor(x_test))
            l_val = VAL_LOSSES[config.val_loss_kind](*z)
    return new, l_trn.item(), l_val.item()


def run_all(config: TunerConfig, data: UnlabeledData) -> list[TunerRun]:
    if config.differentiable:
        return [tune_single(config, data, init, i) for i, init in enumerate(config.init_list)]
    return [tune_single(config, data, None, 0)]


def run_score_variance(run: TunerRun, data: UnlabeledData) -> float:
    return score_variance(score_images(run.params, data.train, data.test))


def select_init(runs: list[TunerRun], scorer: Callable[[TunerRun], float]) -> TunerRun:
    """Pick the run with the largest test-score variance.

    Ties go to the lower final summed loss, then the lower run index.
    """
    if not runs:
        raise TunerError("select_init needs at least one run")
    for run in runs:
        run.score_var = float(scorer(run)) if run.params is not None else float("-inf")
        if not np.isfinite(run.score_var):
            run.score_var = float("-inf")
    best = min(runs, key=lambda r: (-r.score_var, r.final_summed_loss, r.index))
    for run in runs:
        run.selected = run is best
    return best


def tune(config: TunerConfig, data: UnlabeledData) -> tuple[TunerRun, list[TunerRun]]:
    """All starting points, then selection by test-score variance."""
    runs = run_all(config, data)
    best = select_init(runs, lambda r: run_score_variance(r, data))
    return best, runs


def with_overrides(config: TunerConfig, **kw) -> TunerConfig:
    return replace(config, **kw)
