from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from adaptmesh.field import (ActionParams, FieldConfig, FieldTrainConfig, NeuralPointMap, SdfSamples,
                             evaluate_field_loss, field_loss, free_space_interval, projective_labels,
                             query_sdf, sample_free_space, sample_surface, train_field, truncation_for,
                             update_map)
from oracles import block_of


def plane_map(seed=0, dtype=torch.float32, spacing=0.1, side=4.0):
    g = np.stack(np.meshgrid(np.arange(0, side, spacing), np.arange(0, side, spacing), indexing="ij"), -1)
    pts = np.c_[g.reshape(-1, 2), np.zeros(g[..., 0].size)]
    m = NeuralPointMap(seed=seed, dtype=dtype)
    m.insert(pts)
    return m, pts


def test_action_params_validation_and_truncation():
    with pytest.raises(ValueError):
        ActionParams(eta_min=0.8, eta_max=0.6)
    with pytest.raises(ValueError):
        ActionParams(sigma_s=0.0)
    with pytest.raises(ValueError):
        ActionParams(n_nn=0)
    assert truncation_for(0.05) == pytest.approx(0.15)
    assert truncation_for(0.01) == 0.15
    assert truncation_for(0.2) == pytest.approx(0.6)


def test_update_map_single_point_and_idempotent_placement():
    m = NeuralPointMap()
    m.insert(np.array([[0.1, 0.1, 0.1]]))
    assert len(m) == 1
    rng = np.random.default_rng(0)
    block = block_of(rng.uniform(0, 3, (500, 3)))
    m2 = update_map(NeuralPointMap(), block)
    pos, count = m2.positions.copy(), m2.update_count.copy()
    feats = m2.features.clone()
    update_map(m2, block)
    np.testing.assert_array_equal(m2.positions, pos)
    np.testing.assert_array_equal(m2.update_count, 2 * count)
    assert torch.equal(m2.features, feats)
    assert np.all(np.abs(feats.numpy()) < 0.1)


def test_tube_neural_point_count_matches_area_estimate():
    rng = np.random.default_rng(1)
    n = 200000
    th, x = rng.uniform(0, 2 * np.pi, n), rng.uniform(0, 20, n)
    m = NeuralPointMap()
    m.insert(np.c_[x, 3 * np.cos(th), 3 * np.sin(th)])
    estimate = 2 * np.pi * 3 * 20 / 0.3 ** 2
    assert estimate / 2 < len(m) < estimate * 2


def test_one_point_per_cell():
    rng = np.random.default_rng(2)
    m = NeuralPointMap()
    m.insert(rng.uniform(0, 2, (3000, 3)))
    keys = np.floor(m.positions / m.cfg.pitch).astype(int)
    assert len(np.unique(keys, axis=0)) == len(m)


def test_query_at_lone_point_is_decoder_at_zero_offset():
    m = NeuralPointMap(seed=3, dtype=torch.float64)
    m.insert(np.array([[1.0, 1.0, 1.0]]))
    x = m.positions[0]
    value, valid, support = query_sdf(m, x)
    z = torch.cat([m.features[0], torch.zeros(3, dtype=torch.float64)])
    with torch.no_grad():
        expected = float(m.decoder(z[None])[0])
    assert valid and support == 1
    assert value == pytest.approx(expected, abs=1e-12)


def test_query_without_neighbours_is_invalid():
    m = NeuralPointMap()
    assert query_sdf(m, (0, 0, 0), tr=0.45) == (0.45, False, 0)
    m.insert(np.array([[0.0, 0.0, 0.0]]))
    value, valid, support = query_sdf(m, (5.0, 0, 0), tr=0.3)
    assert (value, valid, support) == (0.3, False, 0)


def test_support_counts_all_points_within_radius():
    rng = np.random.default_rng(4)
    m = NeuralPointMap()
    m.insert(rng.uniform(0, 2, (4000, 3)))
    x = rng.uniform(0, 2, (50, 3))
    brute = (np.linalg.norm(x[:, None] - m.positions[None], axis=-1) <= m.search_radius).sum(1)
    np.testing.assert_array_equal(m.support(x), brute)


def test_query_is_deterministic():
    m, _ = plane_map()
    x = np.random.default_rng(5).uniform(0, 4, (100, 3)) * (1, 1, 0.1)
    a = m.query(x)
    b = m.query(x)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_decoder_gradient_matches_finite_differences():
    m, _ = plane_map(seed=6, dtype=torch.float64, spacing=0.2, side=3.0)
    with torch.no_grad():
        m.features.normal_(0.0, 0.5, generator=torch.Generator().manual_seed(1))
    rng = np.random.default_rng(6)
    x = np.c_[rng.uniform(0.5, 2.5, (100, 2)), rng.uniform(-0.2, 0.2, 100)]
    g = m.gradient(x)
    h = 1e-6
    fd = np.zeros_like(x)
    idx, mask = m.neighbors(x)
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        with torch.no_grad():
            up = m.forward(torch.as_tensor(x + e), idx, mask).numpy()
            dn = m.forward(torch.as_tensor(x - e), idx, mask).numpy()
        fd[:, d] = (up - dn) / (2 * h)
    rel = np.linalg.norm(g - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-12)
    assert rel.max() < 1e-4


def test_sample_surface_properties():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(100, 3))
    nrm = rng.normal(size=(100, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    a = ActionParams(sigma_s=0.2, n_surface=4)
    tr = a.truncation
    s = sample_surface(pts, nrm, a, tr, rng)
    assert len(s) == 400 and s.surface.all()
    src = np.repeat(pts, 4, axis=0)
    assert np.all(np.abs(s.labels) <= tr)
    np.testing.assert_allclose(np.linalg.norm(s.positions - src, axis=1), np.abs(s.labels), atol=1e-12)
    tiny = sample_surface(pts, nrm, ActionParams(sigma_s=1e-12), 0.15, rng)
    np.testing.assert_allclose(tiny.positions, np.repeat(pts, 4, axis=0), atol=1e-10)
    assert np.abs(tiny.labels).max() < 1e-10
    bad = nrm.copy()
    bad[0] *= 2
    assert len(sample_surface(pts, bad, a, tr, rng)) == 396


def test_free_space_degenerate_interval_and_bounds():
    rng = np.random.default_rng(8)
    mid = SimpleNamespace(n_free=3, eta_min=0.5, eta_max=0.5)
    s = sample_free_space(np.array([[10.0, 0, 0]]), np.zeros(3), mid, 0.3, rng)
    np.testing.assert_allclose(s.positions, [[5, 0, 0]] * 3)
    np.testing.assert_allclose(s.labels, 5.0)
    a = ActionParams(n_free=2, eta_min=0.3, eta_max=0.9)
    s = sample_free_space(np.array([[0, 8.0, 0]]), np.zeros(3), a, 0.3, rng)
    assert len(s) == 2 and not s.surface.any()
    dist = np.linalg.norm(s.positions, axis=1)
    assert np.all((dist >= 2.4) & (dist <= 7.2))
    with pytest.raises(ValueError):
        sample_free_space(np.zeros((1, 3)), np.zeros(3), a, 0.3, rng)


def test_free_space_interval_is_clamped():
    lo, hi = free_space_interval(np.array([1.0, 10.0]), ActionParams(eta_min=0.5, eta_max=0.95), 0.3)
    np.testing.assert_allclose(hi, [0.7, 9.5])
    np.testing.assert_allclose(lo, [0.5, 5.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([0.05, 0.1, 0.2, 0.3]),
       st.sampled_from([(0.1, 0.6), (0.3, 0.95), (0.5, 0.8)]))
def test_free_samples_stay_outside_truncation_band(seed, sigma, eta):
    rng = np.random.default_rng(seed)
    a = ActionParams(sigma_s=sigma, n_free=4, eta_min=eta[0], eta_max=eta[1])
    tr = a.truncation
    origins = rng.normal(size=(50, 3))
    pts = origins + rng.normal(size=(50, 3)) * rng.uniform(0.1, 10, (50, 1))
    s = sample_free_space(pts, origins, a, tr, rng)
    assert np.all(s.labels >= tr - 1e-12)
    end = np.repeat(pts[np.linalg.norm(pts - origins, axis=1) > tr], 4, axis=0)
    np.testing.assert_allclose(np.linalg.norm(end - s.positions, axis=1), s.labels, atol=1e-9)


def test_normal_guided_labels_are_euclidean_while_projective_overestimate():
    rng = np.random.default_rng(9)
    pts = np.c_[rng.uniform(-5, 5, (500, 2)), np.zeros(500)]
    nrm = np.tile([0.0, 0.0, 1.0], (500, 1))
    incidence = np.radians(60)
    origins = pts + 6.0 * np.array([np.sin(incidence), 0.0, np.cos(incidence)])
    a = ActionParams(sigma_s=0.1, n_surface=4)
    s = sample_surface(pts, nrm, a, a.truncation, rng)
    np.testing.assert_allclose(np.abs(s.labels), np.abs(s.positions[:, 2]), atol=1e-9)
    ends = np.repeat(pts, 4, axis=0)
    rays = np.repeat(origins, 4, axis=0) - ends
    dirs = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    along = ends + np.abs(s.labels)[:, None] * dirs
    proj = projective_labels(along, ends, np.repeat(origins, 4, axis=0))
    off = np.abs(s.labels) > 1e-6
    ratio = proj[off] / np.abs(along[off, 2])
    assert ratio.min() >= 1.9


def test_bce_symmetric_point_has_zero_gradient():
    m, pts = plane_map(dtype=torch.float64, spacing=0.3, side=2.0)
    last = m.decoder.net[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    x = pts + np.array([0.0, 0.0, 0.05])
    idx, mask = m.neighbors(x)
    feats = m.features.clone().requires_grad_(True)
    cfg = FieldTrainConfig(tr=0.3, eikonal_weight=0.0)
    loss = field_loss(m, feats, torch.as_tensor(x), idx, mask, torch.zeros(len(x), dtype=torch.float64),
                      np.zeros(len(x), bool), torch.ones(len(x), dtype=torch.float64), cfg)
    assert float(loss.detach()) == pytest.approx(np.log(2.0), abs=1e-12)
    grads = torch.autograd.grad(loss, [feats] + list(m.decoder.parameters()), allow_unused=True)
    assert max(float(g.abs().max()) for g in grads if g is not None) < 1e-12


def exact_plane_decoder(m, a=1.0, b=1.0):
    """Decoder reproducing ``pitch * offset_z``, the signed distance to z = 0 for points on that plane."""
    F = m.cfg.feature_dim
    net = m.decoder.net
    with torch.no_grad():
        for p in m.decoder.parameters():
            p.zero_()
        net[0].weight[0, F + 2] = a
        net[0].weight[1, F + 2] = -a
        net[2].weight[0, 0], net[2].weight[0, 1] = b, -b
        net[2].weight[1, 0], net[2].weight[1, 1] = -b, b
        net[4].weight[0, 0] = m.cfg.pitch / (a * b)
        net[4].weight[0, 1] = -m.cfg.pitch / (a * b)


def test_exact_plane_field_has_negligible_eikonal_term():
    m, _ = plane_map(dtype=torch.float64, spacing=0.15, side=3.0)
    m.positions[:, 2] = 0.0
    exact_plane_decoder(m)
    rng = np.random.default_rng(10)
    x = np.c_[rng.uniform(0.6, 2.4, (300, 2)), rng.uniform(-0.3, 0.3, 300)]
    v, ok, _ = m.query(x)
    assert ok.all()
    np.testing.assert_allclose(v, x[:, 2], atol=1e-6)
    eik = np.mean((np.linalg.norm(m.gradient(x), axis=1) - 1.0) ** 2)
    assert eik <= 1e-3


def plane_samples(pts, rng, action):
    nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    origins = np.c_[pts[:, :2], np.full(len(pts), 2.0)]
    tr = action.truncation
    return SdfSamples.concat([sample_surface(pts, nrm, action, tr, rng),
                              sample_free_space(pts, origins, action, tr, rng)])


def test_training_recovers_plane_distance():
    m, pts = plane_map()
    rng = np.random.default_rng(11)
    a = ActionParams(sigma_s=0.1, n_surface=4, n_free=2)
    tr = a.truncation
    train_field(m, plane_samples(pts, rng, a), FieldTrainConfig(tr=tr, iters=100), rng)
    q = np.c_[rng.uniform(1, 3, (200, 2)), rng.uniform(-tr, tr, 200)]
    v, ok, _ = m.query(q, tr)
    assert ok.all()
    assert np.abs(v - q[:, 2]).max() <= 0.2 * tr


def test_loss_decreases_on_frozen_batch():
    m, pts = plane_map(spacing=0.2, side=2.0)
    rng = np.random.default_rng(12)
    samples = plane_samples(pts, rng, ActionParams())
    cfg = FieldTrainConfig(tr=0.3, iters=3)
    before = evaluate_field_loss(m, samples, cfg)
    train_field(m, samples, FieldTrainConfig(tr=0.3, iters=30), rng)
    assert evaluate_field_loss(m, samples, cfg) < before


def test_nonfinite_loss_aborts_and_restores():
    m, pts = plane_map(spacing=0.3, side=2.0)
    rng = np.random.default_rng(13)
    s = plane_samples(pts, rng, ActionParams())
    s.weights[:] = np.nan
    feats = m.features.clone()
    state = {k: v.clone() for k, v in m.decoder.state_dict().items()}
    rep = train_field(m, s, FieldTrainConfig(), rng)
    assert rep.aborted and rep.steps == 0
    assert torch.equal(m.features, feats)
    for k, v in m.decoder.state_dict().items():
        assert torch.equal(v, state[k])
    with pytest.raises(ValueError):
        train_field(m, SdfSamples.empty(), FieldTrainConfig())


def test_map_checkpoint_roundtrip(tmp_path):
    m, _ = plane_map(seed=14, spacing=0.3, side=2.0)
    path = tmp_path / "map.npz"
    m.save(path)
    back = NeuralPointMap.load(path)
    x = np.random.default_rng(14).uniform(0, 2, (50, 3)) * (1, 1, 0.1)
    np.testing.assert_array_equal(m.query(x)[0], back.query(x)[0])
    back.insert(np.array([[0.01, 0.01, 0.0]]))
    assert len(back) == len(m)


def test_field_config_roundtrip_in_checkpoint(tmp_path):
    m = NeuralPointMap(FieldConfig(pitch=0.5, k_neighbors=4))
    m.insert(np.zeros((1, 3)))
    m.save(tmp_path / "m.npz")
    assert NeuralPointMap.load(tmp_path / "m.npz").cfg == m.cfg
