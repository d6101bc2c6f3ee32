import numpy as np
import pytest

from remap.aggregate import (AggregationModel, baseline_forward, fit_whitening,
                             l2_normalize, load_model, multiscale_fuse,
                             remap_forward, save_model, stream_forward)
from remap.errors import ContractError, DataError
from remap.grid import build_grid
from remap.tensorio import feature_map


def _model(layer_ids, depths, scales, alpha=None, d_out=None, method="REMAP"):
    d_cat = sum(depths[l] for l in layer_ids)
    d_out = d_out or d_cat
    if alpha is None:
        alpha = {}
        for l in layer_ids:
            alpha[l] = np.ones(1)
    return AggregationModel(
        layer_ids=list(layer_ids), grid_scales=scales, method=method,
        alpha=alpha, projection=np.eye(d_out, d_cat), bias=np.zeros(d_out),
        layer_depths=dict(depths))


def test_l2_normalize_zero_stays_zero():
    v = np.zeros(4)
    assert np.array_equal(l2_normalize(v), v)


def test_stream_forward_single_region_is_unit_pooled_vector():
    data = np.zeros((4, 4, 3), dtype=np.float32)
    data[1, 2] = [3.0, 0.0, 4.0]
    fm = feature_map(data, 1)
    g = build_grid(4, 4, 1)
    out = stream_forward(fm, g, np.ones(1))
    assert np.allclose(out, [0.6, 0.0, 0.8])


def test_stream_forward_weighted_sum_hand_case():
    # 8x6 map, S=1 -> two regions along x; plant distinct maxima
    data = np.zeros((6, 8, 2), dtype=np.float32)
    data[0, 0] = [1.0, 0.0]   # only in region 0 (x in [0,6))
    data[0, 7] = [0.0, 2.0]   # only in region 1 (x in [2,8))
    fm = feature_map(data, 1)
    g = build_grid(8, 6, 1)
    assert len(g.regions) == 2
    out = stream_forward(fm, g, np.array([2.0, 3.0]))
    # region 0 pools to [1,0] (unit already); region 1 pools to [0,2] -> [0,1]
    expected = 2.0 * np.array([1.0, 0.0]) + 3.0 * np.array([0.0, 1.0])
    assert np.allclose(out, expected)


def test_stream_forward_zero_map_gives_zero_vector():
    fm = feature_map(np.zeros((4, 4, 3), dtype=np.float32), 1)
    g = build_grid(4, 4, 2)
    out = stream_forward(fm, g, np.ones(len(g.regions)))
    assert np.array_equal(out, np.zeros(3))


def test_stream_forward_alpha_length_checked():
    fm = feature_map(np.zeros((4, 4, 3), dtype=np.float32), 1)
    g = build_grid(4, 4, 2)
    with pytest.raises(ContractError):
        stream_forward(fm, g, np.ones(len(g.regions) + 1))


def test_remap_forward_unit_norm_and_zero_layer_isolation():
    rng = np.random.default_rng(0)
    data1 = rng.normal(size=(4, 4, 3)).astype(np.float32)
    zeros2 = np.zeros((4, 4, 2), dtype=np.float32)
    g = build_grid(4, 4, 1)
    model = _model([1, 2], {1: 3, 2: 2}, 1,
                   alpha={1: np.ones(len(g.regions)), 2: np.ones(len(g.regions))})
    maps = {1: feature_map(data1, 1), 2: feature_map(zeros2, 2)}
    u = remap_forward(maps, model)
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-5)
    # layer 2 all zeros: its block contributes nothing, so swapping the
    # zero map for another zero map cannot change the descriptor
    u2 = remap_forward({1: maps[1], 2: feature_map(zeros2.copy(), 2)}, model)
    assert np.array_equal(u, u2)
    # but layer 1 content does matter
    other = rng.normal(size=(4, 4, 3)).astype(np.float32)
    u3 = remap_forward({1: feature_map(other, 1), 2: maps[2]}, model)
    assert not np.array_equal(u, u3)


def test_mac_spoc_preprojection_values():
    # 2x2 single-channel map: MAC takes 4, SPoC takes 10
    data = np.array([[[1.0], [2.0]], [[3.0], [4.0]]], dtype=np.float32)
    fm = feature_map(data, 1)
    mac = baseline_forward(fm, "MAC", np.eye(1), np.zeros(1))
    spoc = baseline_forward(fm, "SPoC", np.eye(1), np.zeros(1))
    assert mac[0] == pytest.approx(1.0)  # l2([4]) == [1]
    assert spoc[0] == pytest.approx(1.0)
    # depth 2 exposes the raw values through the norm ratio
    data2 = np.stack([data[:, :, 0], 2 * data[:, :, 0]], axis=2)
    mac2 = baseline_forward(feature_map(data2, 1), "MAC", np.eye(2), np.zeros(2))
    assert np.allclose(mac2, np.array([4.0, 8.0]) / np.sqrt(80.0))
    spoc2 = baseline_forward(feature_map(data2, 1), "SPoC", np.eye(2), np.zeros(2))
    assert np.allclose(spoc2, np.array([10.0, 20.0]) / np.sqrt(500.0))


def test_mac_constant_map_is_normalized_constant():
    data = np.full((3, 5, 4), 2.5, dtype=np.float32)
    mac = baseline_forward(feature_map(data, 1), "MAC", np.eye(4), np.zeros(4))
    assert np.allclose(mac, np.full(4, 0.5))


def test_rmac_is_remap_with_uniform_single_stream():
    rng = np.random.default_rng(7)
    for _ in range(5):
        data = rng.normal(size=(6, 8, 4)).astype(np.float32)
        fm = feature_map(data, 1)
        g = build_grid(8, 6, 1)
        model = _model([1], {1: 4}, 1, alpha={1: np.ones(len(g.regions))},
                       method="REMAP")
        via_remap = remap_forward({1: fm}, model)
        via_baseline = baseline_forward(fm, "RMAC", np.eye(4), np.zeros(4))
        assert np.array_equal(via_remap, via_baseline)


def test_whitening_identity_covariance():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 8)) @ np.diag([5, 4, 3, 2, 1, 0.5, 0.25, 0.1])
    # default eigenvalue floor dents the smallest directions a little
    projection, bias = fit_whitening(X, 8)
    Y = X @ projection.T + bias
    assert np.abs(np.cov(Y, rowvar=False) - np.eye(8)).max() < 1e-3
    assert np.abs(Y.mean(axis=0)).max() < 1e-10
    # with the floor off the sample covariance is identity to fp precision
    projection, bias = fit_whitening(X, 8, eigen_floor=0.0)
    Y = X @ projection.T + bias
    assert np.abs(np.cov(Y, rowvar=False) - np.eye(8)).max() < 1e-9


def test_whitening_diagonal_case():
    # sample covariance exactly diag(4, 1) by construction
    base = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    X = np.concatenate([base] * 30)
    n = X.shape[0]
    X *= np.sqrt((n - 1) / (n / 2.0))  # rescale so cov is exactly diag(4,1)
    cov = np.cov(X, rowvar=False)
    assert np.allclose(np.diag(cov), [4.0, 1.0])
    projection, bias = fit_whitening(X, 2)
    Y = X @ projection.T + bias
    assert np.abs(np.cov(Y, rowvar=False) - np.eye(2)).max() < 1e-4


def test_whitening_orders_by_eigenvalue():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(500, 4)) * np.array([10.0, 1.0, 0.1, 0.01])
    projection, _ = fit_whitening(X, 2)
    # first row must pick off the dominant axis
    assert abs(projection[0, 0]) > abs(projection[0, 1])
    assert abs(projection[1, 1]) > abs(projection[1, 0])


def test_whitening_rank_deficiency_reported():
    rng = np.random.default_rng(1)
    one_d = rng.normal(size=(50, 1)) @ np.ones((1, 6))
    with pytest.raises(DataError) as err:
        fit_whitening(one_d, 3)
    assert "rank 1" in str(err.value)


def test_whitening_rejects_bad_dims():
    with pytest.raises(ContractError):
        fit_whitening(np.zeros((10, 4)), 5)
    with pytest.raises(DataError):
        fit_whitening(np.zeros((1, 4)), 2)


def test_multiscale_fuse_formula():
    x1 = np.array([1.0, 0.0])
    x2 = np.array([0.0, 1.0])
    raw = multiscale_fuse(x1, x2, normalize=False)
    assert np.array_equal(raw, [2.0, 1.4])
    fused = multiscale_fuse(x1, x2)
    assert np.allclose(fused, np.array([2.0, 1.4]) / np.hypot(2.0, 1.4))
    assert np.array_equal(multiscale_fuse(np.zeros(2), np.zeros(2)), np.zeros(2))
    with pytest.raises(ContractError):
        multiscale_fuse(np.zeros(2), np.zeros(3))


def test_model_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    g = build_grid(8, 6, 2)
    # float32-representable parameters survive the round trip exactly
    alpha = {1: rng.random(len(g.regions)).astype(np.float32).astype(np.float64),
             2: rng.random(len(g.regions)).astype(np.float32).astype(np.float64)}
    proj = rng.normal(size=(3, 6)).astype(np.float32).astype(np.float64)
    bias = rng.normal(size=3).astype(np.float32).astype(np.float64)
    model = AggregationModel(layer_ids=[1, 2], grid_scales=2, method="REMAP",
                             alpha=alpha, projection=proj, bias=bias,
                             layer_depths={1: 4, 2: 2})
    path = tmp_path / "model.bin"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.layer_ids == [1, 2]
    assert loaded.grid_scales == 2
    assert loaded.method == "REMAP"
    assert loaded.layer_depths == {1: 4, 2: 2}
    for l in (1, 2):
        assert np.array_equal(loaded.alpha[l], alpha[l])
    assert np.array_equal(loaded.projection, proj)
    assert np.array_equal(loaded.bias, bias)


def test_model_rejects_unknown_method():
    with pytest.raises(ContractError):
        _model([1], {1: 2}, 1, method="GeM")
