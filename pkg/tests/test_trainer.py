"""Tests for k-means init, the combined loss, Adam, and the training loop."""

from __future__ import annotations

from dataclasses import replace
from itertools import product

import numpy as np
import pytest

from warpclust import autodiff as ad
from warpclust import data, spectral, srvf, trainer, warper
from warpclust.errors import ConfigError, NumericalError

SMALL = trainer.TrainConfig(epochs=6, seed=0, encoder_channels=(4, 8, 16),
                            flow_hidden=(16, 16), substeps=2)


def _small_dataset(seed=0, per_cluster=12, t=48):
    return data.generate_synthetic(data.SyntheticSpec(
        per_cluster=per_cluster, grid_size=t, seed=seed))


# ---------------------------------------------------------------------------
# k-means initialization
# ---------------------------------------------------------------------------

def test_kmeans_n_equals_c_returns_the_points():
    pts = np.array([[0.0, 0.0], [5.0, 1.0], [2.0, -3.0]])
    cents = trainer.kmeans_init(pts, 3, seed=4)
    got = sorted(map(tuple, cents))
    want = sorted(map(tuple, pts))
    assert got == want


def test_kmeans_identical_points_collapse():
    pts = np.tile([[2.0, 7.0]], (6, 1))
    cents = trainer.kmeans_init(pts, 2, seed=0)
    np.testing.assert_array_equal(cents, np.tile([[2.0, 7.0]], (2, 1)))


def _inertia(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.min(axis=1).sum()


def test_kmeans_matches_exhaustive_partition_search():
    rng = np.random.default_rng(3)
    pts = np.concatenate([rng.normal(0.0, 0.1, size=(3, 2)),
                          rng.normal(8.0, 0.1, size=(3, 2))])
    best = np.inf
    for labels in product(range(2), repeat=6):
        labels = np.array(labels)
        if len(set(labels)) < 2:
            continue
        cents = np.stack([pts[labels == j].mean(axis=0) for j in range(2)])
        best = min(best, _inertia(pts, cents))
    cents = trainer.kmeans_init(pts, 2, seed=0)
    assert _inertia(pts, cents) == pytest.approx(best, rel=1e-12)


def test_kmeans_deterministic_and_too_few_points():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(20, 4))
    a = trainer.kmeans_init(pts, 3, seed=11)
    b = trainer.kmeans_init(pts, 3, seed=11)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigError):
        trainer.kmeans_init(pts[:2], 3)


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------

def test_total_loss_values():
    assert trainer.total_loss(1.0, 2.0, 0.01) == pytest.approx(1.02, abs=1e-12)
    assert trainer.total_loss(3.5, 99.0, 0.0) == 3.5


def test_total_loss_gradient_decomposes():
    rng = np.random.default_rng(7)
    tape = ad.Tape()
    q = tape.leaf(rng.normal(size=(3, 1, 8)), requires_grad=True)
    cent = tape.leaf(rng.normal(size=(2, 4)), requires_grad=True)
    coeffs = spectral.fourier_project(ad.reshape(q, (3, 8)), k=4)
    p = spectral.soft_assign(coeffs, cent)
    mu = srvf.karcher_templates(q, p)
    l_reg = srvf.registration_loss(q, mu, p)
    l_clu = spectral.clustering_loss(spectral.target_distribution(p.value), p)
    l_tot = trainer.total_loss(l_reg, l_clu, 0.01)
    g_reg = ad.backward(l_reg)
    g_clu = ad.backward(l_clu)
    g_tot = ad.backward(l_tot)
    for leaf in (q, cent):
        want = g_reg.get(leaf, 0.0) + 0.01 * g_clu.get(leaf, 0.0)
        np.testing.assert_allclose(g_tot[leaf], want, rtol=1e-12, atol=1e-15)


def test_frozen_assignments_and_alpha_zero_give_no_centroid_gradient():
    rng = np.random.default_rng(9)
    tape = ad.Tape()
    q = tape.leaf(rng.normal(size=(4, 1, 8)), requires_grad=True)
    cent = tape.leaf(rng.normal(size=(2, 4)), requires_grad=True)
    coeffs = spectral.fourier_project(ad.reshape(q, (4, 8)), k=4)
    p = spectral.soft_assign(coeffs, cent)
    p_const = tape.leaf(p.value)
    mu = srvf.karcher_templates(q, p_const)
    l_reg = srvf.registration_loss(q, mu, p_const)
    grads = ad.backward(trainer.total_loss(
        l_reg, spectral.clustering_loss(
            spectral.target_distribution(p.value), p), 0.0))
    np.testing.assert_array_equal(grads[cent], 0.0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_first_step_size_is_lr():
    # with a constant gradient the bias-corrected first step is exactly lr
    arr = np.array([1.0, -2.0])
    state = trainer.AdamState()
    trainer.adam_step([("a", arr)], {"a": np.array([3.0, -4.0])}, state,
                      lr=0.1)
    np.testing.assert_allclose(arr, [0.9, -1.9], atol=1e-8)


def test_adam_moments_track_quadratic_descent():
    arr = np.array([4.0])
    state = trainer.AdamState()
    for _ in range(400):
        trainer.adam_step([("a", arr)], {"a": 2.0 * arr}, state, lr=0.05)
    assert abs(arr[0]) < 1e-3


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def test_train_runs_and_reports_consistent_shapes():
    ds = _small_dataset()
    rep = trainer.train(ds, SMALL)
    e = SMALL.epochs
    assert rep.total_losses.shape == (e + 1,)
    assert rep.epoch_seconds.shape == (e,)
    assert rep.warps.shape == (ds.n, ds.length)
    assert rep.aligned.shape == ds.values.shape
    assert rep.assignments.shape == (ds.n, SMALL.clusters)
    np.testing.assert_allclose(rep.assignments.sum(axis=1), 1.0, atol=1e-12)
    assert set(np.unique(rep.labels)) <= {0, 1}
    warper.assert_valid_warps(rep.warps)


def test_train_loss_identity_and_final_row_reproducible():
    ds = _small_dataset(seed=3)
    rep = trainer.train(ds, SMALL)
    np.testing.assert_allclose(
        rep.total_losses, rep.reg_losses + SMALL.alpha * rep.clu_losses,
        rtol=0.0, atol=1e-9)
    # one forward from (params, assignments) reproduces the last loss row
    _, gamma, aligned, _, l_reg, l_clu, l_tot = trainer._epoch_forward(
        ds.values, ds.grid, rep.params, rep.assignments, SMALL)
    assert l_tot.value.item() == rep.total_losses[-1]
    np.testing.assert_array_equal(gamma.value, rep.warps)
    np.testing.assert_array_equal(aligned.value, rep.aligned)


def test_train_is_deterministic():
    ds = _small_dataset(seed=5)
    a = trainer.train(ds, SMALL)
    b = trainer.train(ds, SMALL)
    np.testing.assert_array_equal(a.total_losses, b.total_losses)
    np.testing.assert_array_equal(a.warps, b.warps)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.labels, b.labels)
    for (name, arr_a), (_, arr_b) in zip(a.params.named_arrays(),
                                         b.params.named_arrays()):
        np.testing.assert_array_equal(arr_a, arr_b, err_msg=name)


def test_train_recovers_two_clusters_quickly():
    ds = _small_dataset(seed=1, per_cluster=20, t=64)
    rep = trainer.train(ds, replace(SMALL, epochs=12))
    match = (rep.labels == ds.labels).mean()
    assert max(match, 1.0 - match) >= 0.9


def test_train_mini_batch_mode():
    ds = _small_dataset(seed=2, per_cluster=10)
    cfg = replace(SMALL, epochs=3, batch_size=8)
    rep = trainer.train(ds, cfg)
    assert np.all(np.isfinite(rep.total_losses))
    np.testing.assert_allclose(
        rep.total_losses, rep.reg_losses + cfg.alpha * rep.clu_losses,
        atol=1e-9)
    again = trainer.train(ds, cfg)
    np.testing.assert_array_equal(rep.warps, again.warps)


def test_train_diverging_lr_aborts_with_epoch():
    ds = _small_dataset(seed=4, per_cluster=6)
    with np.errstate(all="ignore"), pytest.raises(NumericalError,
                                                  match="epoch"):
        trainer.train(ds, replace(SMALL, learning_rate=1e6, epochs=30))


def test_train_freeze_templates_variant_runs():
    ds = _small_dataset(seed=6, per_cluster=8)
    frozen = trainer.train(ds, replace(SMALL, epochs=3,
                                       freeze_templates=True))
    default = trainer.train(ds, replace(SMALL, epochs=3))
    assert np.all(np.isfinite(frozen.total_losses))
    assert not np.array_equal(frozen.params.centroids,
                              default.params.centroids)


def test_train_config_validation():
    ds = _small_dataset(per_cluster=3)
    for bad in (replace(SMALL, clusters=0), replace(SMALL, alpha=-0.1),
                replace(SMALL, epochs=0), replace(SMALL, substeps=0),
                replace(SMALL, learning_rate=0.0),
                replace(SMALL, kernel_dof=0.0)):
        with pytest.raises(ConfigError):
            trainer.train(ds, bad)
    with pytest.raises(ConfigError, match="clusters"):
        trainer.train(data.Dataset(values=ds.values[:1], grid=ds.grid),
                      SMALL)


def test_uniform_initial_assignments_shape_first_epoch():
    # epoch 0 mixes warps uniformly: with clusters=1 the mixture is the
    # single class warp, and training still runs
    ds = _small_dataset(seed=7, per_cluster=6)
    rep = trainer.train(ds, replace(SMALL, clusters=1, epochs=2))
    assert rep.assignments.shape == (ds.n, 1)
    np.testing.assert_array_equal(rep.assignments, 1.0)


# ---------------------------------------------------------------------------
# scaling probe
# ---------------------------------------------------------------------------

def test_scaling_probe_reports_one_time_per_size():
    cfg = replace(SMALL, epochs=2)
    times = trainer.epoch_scaling_probe([6, 12], cfg, grid_size=32,
                                        probe_epochs=2)
    assert len(times) == 2 and all(t > 0 for t in times)
    with pytest.raises(ConfigError):
        trainer.epoch_scaling_probe([12, 6], cfg)


def test_scaling_probe_n_of_one():
    cfg = replace(SMALL, clusters=1)
    times = trainer.epoch_scaling_probe([1], cfg, grid_size=32,
                                        probe_epochs=2)
    assert len(times) == 1


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_checkpoint_round_trips_bitwise(tmp_path):
    ds = _small_dataset(seed=8, per_cluster=5)
    rep = trainer.train(ds, replace(SMALL, epochs=2))
    path = str(tmp_path / "model.ckpt")
    trainer.save_checkpoint(path, rep.params, rep.config, epochs := 2)
    params, config, epoch = trainer.load_checkpoint(path)
    assert epoch == epochs
    assert config == rep.config
    for (name, arr), (_, back) in zip(rep.params.named_arrays(),
                                      params.named_arrays()):
        np.testing.assert_array_equal(arr, back, err_msg=name)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "not_a_checkpoint.bin"
    path.write_bytes(b"something else entirely")
    with pytest.raises(ConfigError):
        trainer.load_checkpoint(str(path))
