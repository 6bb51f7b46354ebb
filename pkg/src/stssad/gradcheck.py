"""Finite-difference gradient suites for the autodiff core, augmentations, losses and tuner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import augment, tensor, tuner, valloss
from .detector import init_params
from .tensor import Tensor, finite_diff_check, grad

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
HYPERGRAD_TOL = 1e-2
TOY_TOL = 1e-10
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)


@dataclass
class SuiteReport:
    name: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> CheckResult | None:
        return max(self.checks, key=lambda c: c.error / c.tol) if self.checks else None

    @property
    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def summary(self) -> str:
        w = self.worst
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} {self.name}: {len(self.checks)} checks, worst {w.name} rel err {w.error:.3e} (tol {w.tol:g})"
        if not self.passed:
            line += "; failing: " + ", ".join(self.failures)
        return line


def _rel_err(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = STEP) -> float:
    try:
        return finite_diff_check(f, x, step).max_rel_err
    except (FloatingPointError, tensor.GradientError, ValueError):
        return float("inf")


# ---------------------------------------------------------------------------
# primitive cases: name -> (input sampler, function of the differentiated input)

def _away_from(rng, shape, lo, hi, kinks=(), margin=0.05):
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.sign(x[near] - k + 1e-300) * margin + (x[near] - k)
    return x


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, np.ndarray, Callable]]:
    """``(label, x, f)`` triples; each ``f`` maps a tensor to a tensor built around one primitive."""
    b34 = rng.normal(size=(3, 4))
    b4 = rng.uniform(0.5, 2.0, size=4) * rng.choice([-1.0, 1.0], size=4)
    m42 = rng.normal(size=(4, 2))
    idx = rng.integers(0, 12, size=7)
    T = tensor
    return [
        ("add[0]", rng.normal(size=(3, 4)), lambda x: T.add(x, b4)),
        ("add[1]", rng.normal(size=4), lambda x: T.add(b34, x)),
        ("sub[0]", rng.normal(size=(3, 4)), lambda x: T.sub(x, b4)),
        ("sub[1]", rng.normal(size=4), lambda x: T.sub(b34, x)),
        ("mul[0]", rng.normal(size=(3, 4)), lambda x: T.mul(x, b4)),
        ("mul[1]", rng.normal(size=4), lambda x: T.mul(b34, x)),
        ("div[0]", rng.normal(size=(3, 4)), lambda x: T.div(x, b4)),
        ("div[1]", b4.copy(), lambda x: T.div(b34, x)),
        ("neg", rng.normal(size=(3, 4)), T.neg),
        ("matmul[0]", rng.normal(size=(3, 4)), lambda x: T.matmul(x, m42)),
        ("matmul[1]", rng.normal(size=(4, 2)), lambda x: T.matmul(b34, x)),
        ("exp", rng.uniform(-2, 2, size=(3, 4)), T.exp),
        ("log", rng.uniform(0.5, 3, size=(3, 4)), T.log),
        ("sqrt", rng.uniform(0.5, 3, size=(3, 4)), T.sqrt),
        ("square", rng.normal(size=(3, 4)), T.square),
        ("relu", _away_from(rng, (3, 4), -1, 1, kinks=(0.0,)), T.relu),
        ("sigmoid", rng.normal(size=(3, 4)) * 2, T.sigmoid),
        ("softplus", rng.normal(size=(3, 4)) * 2, T.softplus),
        ("clamp01", _away_from(rng, (3, 4), -0.5, 1.5, kinks=(0.0, 1.0)), T.clamp01),
        ("sin", rng.uniform(-3, 3, size=(3, 4)), T.sin),
        ("cos", rng.uniform(-3, 3, size=(3, 4)), T.cos),
        ("sum", rng.normal(size=(3, 4)), lambda x: T.sum_(x, axis=0, keepdims=True)),
        ("mean", rng.normal(size=(3, 4)), lambda x: T.mean(x, axis=1)),
        ("broadcast", rng.normal(size=(3, 1)), lambda x: T.broadcast_to(x, (3, 4))),
        ("sum_to", rng.normal(size=(3, 4)), lambda x: T.sum_to(x, (1, 4))),
        ("reshape", rng.normal(size=(3, 4)), lambda x: T.reshape(x, (2, 6))),
        ("transpose", rng.normal(size=(3, 4)), T.transpose),
        ("concat_rows", rng.normal(size=(2, 4)), lambda x: T.concat_rows([x, b34])),
        ("slice_rows", rng.normal(size=(3, 4)), lambda x: T.slice_rows(x, 1, 3)),
        ("l2norm_rows", rng.normal(size=(3, 4)) + 0.5, lambda x: T.l2norm_rows(x, 1e-12)),
        ("gather", rng.normal(size=(3, 4)), lambda x: T.gather(x, idx)),
        ("scatter_add", rng.normal(size=7), lambda x: T.scatter_add(x, idx, (3, 4))),
    ]


def _dot(t: Tensor, w: np.ndarray) -> Tensor:
    # through matmul rather than mul, so a broken mul rule cannot cancel itself out
    return tensor.matmul(tensor.reshape(t, (1, t.size)), Tensor(w.reshape(-1, 1))).sum()


def _weighted(f: Callable, rng: np.random.Generator, x: np.ndarray) -> Callable:
    """Scalarize ``f`` with fixed random weights so no gradient component cancels."""
    with tensor.no_grad():
        shape = f(Tensor(x)).shape
    w = rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return lambda t: _dot(f(t), w)


def _second_order(f: Callable, rng: np.random.Generator, x: np.ndarray) -> Callable:
    """``x -> v . grad f(x)``: finite differences of this check the double-backward path."""
    v = rng.normal(size=x.shape)

    def g(t: Tensor) -> Tensor:
        # the finite-difference passes run without recording, so re-enable it here
        with tensor._grad_mode(True):
            leaf = t if t.requires_grad else Tensor(t.data, requires_grad=True)
            (gx,) = grad(f(leaf), [leaf], create_graph=True)
            return _dot(gx, v)

    return g


SMOOTH_SECOND_ORDER = {"mul[0]", "div[0]", "div[1]", "exp", "log", "sqrt", "square", "sigmoid",
                       "softplus", "sin", "cos", "l2norm_rows", "matmul[0]"}


def suite_tensor_core(trials: int = 3, seed: int = 0) -> SuiteReport:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for label, x, f in primitive_cases(rng):
            scalar = _weighted(f, rng, x)
            worst[label] = max(worst.get(label, 0.0), _rel_err(scalar, x))
            if label in SMOOTH_SECOND_ORDER:
                key = f"{label}:second-order"
                worst[key] = max(worst.get(key, 0.0), _rel_err(_second_order(scalar, rng, x), x))
    report = SuiteReport("tensor_core")
    for label, err in worst.items():
        tol = COMPOSITE_TOL if label.endswith("second-order") else PRIMITIVE_TOL
        report.checks.append(CheckResult(label, err, tol))
    return report


# ---------------------------------------------------------------------------
# augmentations

def cutdiff_case(rng: np.random.Generator, m: int = 12):
    """Image, patch parameters and centre with every output pixel away from the clamp boundaries."""
    x = rng.uniform(0.55, 1.0, size=(m, m, 1))
    a = np.array([rng.uniform(0.08, 0.15), rng.uniform(-0.03, 0.03), rng.uniform(0.08, 0.15)])
    mu = rng.uniform(0.3, 0.7, size=2)
    with tensor.no_grad():
        out = augment.cutdiff(x, a, mu).data
    mask = ((out > 1e-3) & (out < 1 - 1e-3)).astype(np.float64)
    return x, a, mu, mask


def suite_augment(trials: int = 3, seed: int = 1) -> SuiteReport:
    rng = np.random.default_rng(seed)
    report = SuiteReport("augment")
    err_a = err_x = err_rot = err_rot_x = 0.0
    for _ in range(trials):
        x, a, mu, mask = cutdiff_case(rng)
        w = rng.uniform(0.5, 1.5, size=x.shape) * mask
        err_a = max(err_a, _rel_err(lambda t: tensor.sum_(augment.cutdiff(x, t, mu) * w), a))
        err_x = max(err_x, _rel_err(lambda t: tensor.sum_(augment.cutdiff(t, a, mu) * w), x))
        img = smooth_image(rng, 10)
        wr = rng.uniform(0.5, 1.5, size=img.shape)
        angle = np.array([rng.uniform(0.2, 2 * np.pi - 0.2)])
        err_rot = max(err_rot, _rel_err(lambda t: tensor.sum_(augment.rotate(img, t) * wr), angle))
        err_rot_x = max(err_rot_x, _rel_err(lambda t: tensor.sum_(augment.rotate(t, angle[0]) * wr), img))
    report.checks += [
        CheckResult("cutdiff wrt a", err_a, COMPOSITE_TOL),
        CheckResult("cutdiff wrt x", err_x, COMPOSITE_TOL),
        CheckResult("rotate wrt angle", err_rot, COMPOSITE_TOL),
        CheckResult("rotate wrt x", err_rot_x, COMPOSITE_TOL),
    ]
    return report


def smooth_image(rng: np.random.Generator, m: int) -> np.ndarray:
    """Off-centre Gaussian bump, so rotation moves mass and the derivative is not tiny."""
    i, j = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    ci, cj = rng.uniform(0.25 * m, 0.45 * m, size=2)
    s = 0.2 * m
    return (0.1 + 0.8 * np.exp(-((i - ci) ** 2 + (j - cj) ** 2) / (2 * s * s)))[..., None]


# ---------------------------------------------------------------------------
# validation losses

def suite_valloss(trials: int = 3, seed: int = 2) -> SuiteReport:
    rng = np.random.default_rng(seed)
    report = SuiteReport("valloss")
    counts = (5, 6, 7)
    n = sum(counts)

    def parts(t):
        return tensor.slice_rows(t, 0, 5), tensor.slice_rows(t, 5, 11), tensor.slice_rows(t, 11, n)

    def frozen_mmd(normalize: bool, z: np.ndarray) -> Callable:
        # the median bandwidth is a constant for differentiation, so freeze it at z
        batch = valloss.EmbeddingBatch(Tensor(z), counts)
        rows = valloss.normalize_tpsd(batch).rows if normalize else batch.rows
        sigma = valloss.median_bandwidth(rows.data[:11], rows.data[11:])

        def f(t):
            b = valloss.EmbeddingBatch(t, counts)
            r = valloss.normalize_tpsd(b).rows if normalize else b.rows
            return valloss.mmd(tensor.slice_rows(r, 0, 11), tensor.slice_rows(r, 11, n), bandwidth=sigma)

        return f

    errs = {"mean_distance_loss wrt rows": 0.0, "normalize_tpsd wrt rows": 0.0,
            "mmd (normalized) wrt rows": 0.0, "mmd (raw) wrt rows": 0.0}
    for _ in range(trials):
        z = rng.normal(size=(n, 3))
        wn = rng.normal(size=(n, 3))
        errs["mean_distance_loss wrt rows"] = max(errs["mean_distance_loss wrt rows"],
                                                  _rel_err(lambda t: valloss.validation_loss(*parts(t)), z))
        errs["normalize_tpsd wrt rows"] = max(errs["normalize_tpsd wrt rows"], _rel_err(
            lambda t: tensor.sum_(valloss.normalize_tpsd(valloss.EmbeddingBatch(t, counts)).rows * wn), z))
        errs["mmd (normalized) wrt rows"] = max(errs["mmd (normalized) wrt rows"], _rel_err(frozen_mmd(True, z), z))
        errs["mmd (raw) wrt rows"] = max(errs["mmd (raw) wrt rows"], _rel_err(frozen_mmd(False, z), z))
    report.checks += [CheckResult(k, v, COMPOSITE_TOL) for k, v in errs.items()]
    return report


# ---------------------------------------------------------------------------
# tuner

def micro_dataset(rng: np.random.Generator, m: int = 8, n: int = 4):
    x_trn = rng.uniform(0.3, 0.9, size=(n, m, m, 1))
    x_test = rng.uniform(0.3, 0.9, size=(n, m, m, 1))
    return x_trn, x_test


def composite_value(a, params, x_trn, x_test, kind, alpha, mu, second_order) -> float:
    """``L_val`` after re-running the inner step at ``a`` (the finite-difference oracle)."""
    with tensor.tape_scope():
        l_val, *_ = tuner.outer_objective(a, params, x_trn, x_test, kind, alpha, mu, "mean_distance", True)
        return l_val.item()


def frozen_value(a, frozen, x_trn, x_test, kind, mu) -> float:
    """``L_val`` with ``theta'`` held fixed."""
    with tensor.no_grad():
        aug = tuner.make_aug_fn(kind, mu=mu)(Tensor(x_trn), Tensor(np.asarray(a, dtype=np.float64)))
        z = tuner.embed_all(frozen, Tensor(x_trn), aug, Tensor(x_test))
        return valloss.validation_loss(*z).item()


def _fd(fun: Callable[[np.ndarray], float], a: np.ndarray, step: float) -> np.ndarray:
    out = np.zeros_like(a)
    for i in range(a.size):
        e = np.zeros_like(a)
        e.flat[i] = step
        out.flat[i] = (fun(a + e) - fun(a - e)) / (2 * step)
    return out


def _vec_rel(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12))


def hypergradient_errors(seed: int = 3, kind: str = "cutdiff", alpha: float = 0.5, step: float = 1e-4):
    """Relative errors of the second-order and first-order gradients against finite differences."""
    rng = np.random.default_rng(seed)
    x_trn, x_test = micro_dataset(rng)
    params = init_params(x_trn[0].size, rng, hidden=(6,), embed_dim=3)
    if kind == "cutdiff":
        a = np.array([0.25, 0.05, 0.2])
        mu = rng.uniform(0.3, 0.7, size=(len(x_trn), 2))
    else:
        a = np.array([0.7])
        mu = None
    g2, _, _, _ = tuner.hypergradient(a, params, x_trn, x_test, kind, alpha, mu)
    num2 = _fd(lambda v: composite_value(v, params, x_trn, x_test, kind, alpha, mu, True), a, step)
    g1, _, _, frozen = tuner.first_order_step(a, params, x_trn, x_test, kind, alpha, mu)
    num1 = _fd(lambda v: frozen_value(v, frozen, x_trn, x_test, kind, mu), a, step)
    return _vec_rel(g2, num2), _vec_rel(g1, num1), g2, g1


def suite_tuner(seed: int = 3) -> SuiteReport:
    report = SuiteReport("tuner")
    toy2 = tuner.scalar_toy_gradient(1.0, 0.0, 0.1, True)
    toy1 = tuner.scalar_toy_gradient(1.0, 0.0, 0.1, False)
    report.checks += [
        CheckResult("scalar toy second order = 0.32", abs(toy2 - 0.32), TOY_TOL),
        CheckResult("scalar toy first order = 0", abs(toy1), TOY_TOL),
    ]
    for kind in ("cutdiff", "rotation"):
        e2, e1, _, _ = hypergradient_errors(seed, kind)
        report.checks += [
            CheckResult(f"hypergradient ({kind})", e2, HYPERGRAD_TOL),
            CheckResult(f"first-order gradient ({kind})", e1, HYPERGRAD_TOL),
        ]
    return report


SUITES: dict[str, Callable[[], SuiteReport]] = {
    "tensor_core": suite_tensor_core,
    "augment": suite_augment,
    "valloss": suite_valloss,
    "tuner": suite_tuner,
}


def run_suites(names=None) -> list[SuiteReport]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    return [SUITES[n]() for n in names]
