import numpy as np
import pytest

from stssad import detector, gradcheck, valloss
from stssad.tensor import Tensor


def _batch(rng, counts=(6, 7, 8), d=3):
    return valloss.EmbeddingBatch(Tensor(rng.normal(size=(sum(counts), d))), counts)


def test_lemma_configuration_and_oracle():
    assert valloss.appendix_oracle(0.0, 0.0) == 1.0
    loss = valloss.mean_distance_loss(valloss.normalize_tpsd(valloss.scalar_configuration(0.3, -0.4))).item()
    assert loss == pytest.approx(valloss.appendix_oracle(0.3, -0.4), abs=1e-9)


def test_tpsd_matches_pairwise_definition():
    z = np.random.default_rng(0).normal(size=(9, 4))
    direct = sum(np.sum((a - b) ** 2) for a in z for b in z)
    assert valloss.tpsd(Tensor(z)).item() == pytest.approx(direct)


def test_loss_is_scale_and_shift_invariant():
    rng = np.random.default_rng(1)
    b = _batch(rng)
    moved = valloss.EmbeddingBatch(Tensor(b.rows.data * 7.5 - 3.0), b.counts)
    l1 = valloss.mean_distance_loss(valloss.normalize_tpsd(b)).item()
    l2 = valloss.mean_distance_loss(valloss.normalize_tpsd(moved)).item()
    assert l1 == pytest.approx(l2, abs=1e-12)


def test_collapsed_embeddings_raise():
    b = valloss.EmbeddingBatch(Tensor(np.ones((6, 2))), (2, 2, 2))
    with pytest.raises(valloss.CollapsedEmbeddingsError):
        valloss.normalize_tpsd(b)


def test_empty_partition_rejected():
    b = valloss.EmbeddingBatch(Tensor(np.random.default_rng(2).normal(size=(5, 2))), (2, 0, 3))
    with pytest.raises(ValueError, match="non-empty"):
        valloss.mean_distance_loss(valloss.normalize_tpsd(b))


def test_mmd_zero_on_identical_sets_and_symmetric():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(12, 3)) + 1
    assert valloss.mmd(a, a).item() == pytest.approx(0.0, abs=1e-12)
    assert valloss.mmd(a, b).item() == pytest.approx(valloss.mmd(b, a).item())
    assert valloss.mmd(a, b).item() > valloss.mmd(a, rng.normal(size=(12, 3))).item()


@pytest.mark.parametrize("kind", sorted(valloss.VAL_LOSSES))
def test_all_validation_losses_finite(kind):
    rng = np.random.default_rng(4)
    z = [Tensor(rng.normal(size=(n, 4))) for n in (5, 5, 6)]
    assert np.isfinite(valloss.VAL_LOSSES[kind](*z).item())


def test_valloss_gradient_suite_passes():
    report = gradcheck.suite_valloss()
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# detector

def test_encoder_shapes_and_determinism():
    rng = np.random.default_rng(0)
    p1 = detector.init_params(16 * 16, np.random.default_rng(5), hidden=(8,), embed_dim=4)
    p2 = detector.init_params(16 * 16, np.random.default_rng(5), hidden=(8,), embed_dim=4)
    x = rng.uniform(size=(3, 16, 16, 1))
    z = detector.encode(p1, x)
    assert z.shape == (3, 4)
    np.testing.assert_array_equal(z.data, detector.encode(p2, x).data)


def test_training_step_lowers_loss():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(16, 16, 16, 1))
    x_aug = np.clip(x - 0.4, 0, 1)
    params = detector.init_params(16 * 16, rng, hidden=(8,), embed_dim=4)
    losses = []
    for _ in range(20):
        params, loss = detector.train_step(params, Tensor(x), lambda xi, a: Tensor(x_aug), None, 0.1)
        losses.append(loss)
    assert losses[-1] < losses[0] - 0.01


def test_gde_scores_outliers_higher():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(200, 3))
    gde = detector.fit_gde(z)
    s = detector.anomaly_score(np.array([[0.0, 0, 0], [6.0, 6, 6]]), gde)
    assert s[1] > s[0]
    assert np.ndim(detector.anomaly_score(np.zeros(3), gde)) == 0


def test_gde_survives_rank_deficient_embeddings():
    z = np.random.default_rng(3).normal(size=(10, 1)) @ np.ones((1, 4))
    gde = detector.fit_gde(z)
    assert np.all(np.isfinite(detector.anomaly_score(z, gde)))


def test_score_variance_uses_sample_variance():
    assert detector.score_variance([1.0, 2.0, 3.0]) == 1.0
    with pytest.raises(detector.DetectorError):
        detector.score_variance([1.0])


def test_checkpoint_round_trip(tmp_path):
    p = detector.init_params(64, np.random.default_rng(4), hidden=(5, 6), embed_dim=3)
    detector.save_checkpoint(tmp_path / "p.ckpt", p)
    q = detector.load_checkpoint(tmp_path / "p.ckpt")
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_corrupt_checkpoint_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(Exception, match="magic|format|STSSAD"):
        detector.load_checkpoint(path)


def test_zero_step_keeps_params_exactly():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(4, 16, 16, 1))
    p = detector.init_params(256, rng, hidden=(4,), embed_dim=2)
    q, _ = detector.train_step(p, Tensor(x), lambda xi, a: Tensor(x[::-1] * 0.5), None, 0.0)
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_small_step_decreases_training_loss_for_every_seed():
    x = np.random.default_rng(0).uniform(size=(6, 16, 16, 1))
    x_aug = Tensor(np.clip(x - 0.3, 0, 1))
    for seed in range(50):
        p = detector.init_params(256, np.random.default_rng(seed), hidden=(8,), embed_dim=4)
        q, before = detector.train_step(p, Tensor(x), lambda xi, a: x_aug, None, 1e-3)
        after = detector.bce_train_loss(q, Tensor(x), x_aug).item()
        assert after < before, seed
