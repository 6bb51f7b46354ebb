import numpy as np
import pytest

from stssad import augment, gradcheck
from stssad.augment import AugmentationError, AugParams


@pytest.mark.parametrize("g,s,r", [(0.0, 0.08, 1.0), (0.0, 0.16, 2.0), (0.3, 0.1, 0.5), (-1.2, 0.05, 1.7)])
def test_decompose_inverts_recompose(g, s, r):
    L = augment.recompose_L(g, s, r)
    g2, s2, r2 = augment.decompose_L(L)
    assert s2 == pytest.approx(s) and r2 == pytest.approx(r)
    np.testing.assert_allclose(augment.recompose_L(g2, s2, r2), L, atol=1e-12)


def test_cholesky_storage_keeps_patch_and_size():
    p = augment.cutdiff_params(0.12, 1.5, 0.7)
    g, s, r = augment.decompose_L(p)
    L = augment.recompose_L(0.7, 0.12, 1.5)
    np.testing.assert_allclose(augment.lower_matrix(p.values) @ augment.lower_matrix(p.values).T, L @ L.T,
                               atol=1e-14)
    assert augment.patch_size(p.values) == pytest.approx(0.12)
    # the stored factor may decompose to the equivalent (g + pi/2, s, 1/r) patch
    assert s == pytest.approx(0.12) and min(r, 1 / r) == pytest.approx(1 / 1.5)
    L2 = augment.recompose_L(g, s, r)
    np.testing.assert_allclose(L2 @ L2.T, L @ L.T, atol=1e-14)


def test_true_patch_factor_layout():
    # ratio 2 at angle 0: L = diag(s / 2, 2 s)
    np.testing.assert_allclose(augment.cutdiff_params(0.16, 2.0).values, [0.08, 0.0, 0.32])


def test_project_clips_and_wraps():
    p = AugParams("cutdiff", [2.0, -3.0, 0.0]).project()
    np.testing.assert_array_equal(p.values, [1.0, -1.0, augment.MIN_DIAG])
    r = AugParams("rotation", [-np.pi / 2]).project()
    assert r.values[0] == pytest.approx(1.5 * np.pi)
    assert p.contains() and r.contains()


def test_wrong_arity_rejected():
    with pytest.raises(AugmentationError, match="expects 3"):
        AugParams("cutdiff", [0.1, 0.1])
    with pytest.raises(AugmentationError, match="unknown"):
        AugParams("mixup", [0.1])


@pytest.mark.parametrize("kind", augment.KINDS)
def test_sample_params_inside_box(kind):
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert augment.sample_params(kind, rng).contains()


def test_cutdiff_patch_peaks_at_centre():
    mu = np.array([[0.5, 0.25]])
    p = augment.patch_matrix(augment.cutdiff_params(0.1).values, mu, 32).data[0]
    i, j = np.unravel_index(np.argmax(p), p.shape)
    assert (i + 1) / 32 == pytest.approx(0.5) and (j + 1) / 32 == pytest.approx(0.25)
    assert p.max() == pytest.approx(1.0)


def test_cutdiff_darkens_and_stays_in_unit_range():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.2, 1.0, size=(4, 32, 32, 1))
    out = augment.cutdiff(x, augment.cutdiff_params(0.15).values, rng).data
    assert out.shape == x.shape
    assert np.all(out <= x + 1e-15) and out.min() >= 0.0 and out.max() <= 1.0
    assert np.all((x - out).reshape(4, -1).max(axis=1) > 0.5)


def test_tiny_patch_is_nearly_identity():
    x = np.full((32, 32, 1), 0.5)
    out = augment.cutdiff(x, [augment.MIN_DIAG, 0.0, augment.MIN_DIAG], np.array([0.3, 0.3])).data
    assert np.abs(out - x).max() < 1e-6


def test_cutdiff_rejects_bad_centre():
    with pytest.raises(AugmentationError, match="centre"):
        augment.cutdiff(np.zeros((16, 16, 1)), augment.cutdiff_params(0.1).values, np.array([1.5, 0.5]))


def test_rotation_by_zero_and_full_turn_is_identity():
    x = np.random.default_rng(2).uniform(size=(2, 16, 16, 1))
    np.testing.assert_allclose(augment.rotate(x, 0.0).data, x, atol=1e-12)
    np.testing.assert_allclose(augment.rotate(x, 2 * np.pi).data, x, atol=1e-9)


def test_rotation_by_half_turn_flips_both_axes():
    x = np.random.default_rng(3).uniform(size=(16, 16, 1))
    np.testing.assert_allclose(augment.rotate(x, np.pi).data, x[::-1, ::-1], atol=1e-9)


def test_cutout_and_cutpaste_shapes_and_effect():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(32, 32, 1))
    co = augment.cutout(x, 0.1, top_left=(3, 5))
    assert co.shape == x.shape and np.any(co != x)
    assert np.all(co[np.where(co != x)] == 0.0)
    cp = augment.cutpaste(x, 0.1, 2.0, rng)
    assert cp.shape == x.shape and np.any(cp != x)


def test_apply_is_deterministic_under_seed():
    x = np.random.default_rng(5).uniform(size=(3, 32, 32, 1))
    for kind in augment.KINDS:
        p = augment.sample_params(kind, np.random.default_rng(6))
        a = augment.apply(p, x, np.random.default_rng(7)).data
        b = augment.apply(p, x, np.random.default_rng(7)).data
        np.testing.assert_array_equal(a, b)


def test_augment_gradient_suite_passes():
    report = gradcheck.suite_augment()
    assert report.passed, report.summary()
