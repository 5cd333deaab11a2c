import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparse4d import tensor as T
from sparse4d.errors import ConfigError, DimensionError
from sparse4d.fusion import (DepthNet, bin_centers, depth_reweight, depth_target, fuse_keypoints,
                             fuse_temporal, fuse_view_scale, interp_rows, predict_weights, sample_confidence)
from sparse4d.tensor import Linear, Tensor

F64 = np.float64


def test_softmax_weights_normalize_over_views_and_scales(rng):
    psi = Linear(8, 3 * 2 * 2 * 4, rng, F64)
    w = predict_weights(Tensor(rng.normal(size=(5, 8))), psi, 3, 2, 2, 4).data
    assert w.shape == (5, 3, 2, 2, 4)
    np.testing.assert_allclose(w.sum(axis=(2, 3)), 1.0, atol=1e-12)


def test_sigmoid_weights_are_independent(rng):
    psi = Linear(8, 3 * 2 * 2 * 4, rng, F64)
    w = predict_weights(Tensor(rng.normal(size=(5, 8))), psi, 3, 2, 2, 4, mode="sigmoid").data
    assert ((w > 0) & (w < 1)).all()
    assert not np.allclose(w.sum(axis=(2, 3)), 1.0)


def test_weight_config_errors(rng):
    psi = Linear(6, 4, rng, F64)
    with pytest.raises(ConfigError, match="num_groups"):
        predict_weights(Tensor(np.zeros((1, 6))), psi, 1, 1, 1, 4)
    with pytest.raises(ConfigError, match="weight_norm"):
        predict_weights(Tensor(np.zeros((1, 6))), Linear(6, 2, rng, F64), 1, 1, 1, 2, mode="max")


def test_single_view_scale_with_unit_weight_is_identity(rng):
    f = rng.normal(size=(2, 3, 2, 1, 1, 4))
    out = fuse_view_scale(Tensor(f), Tensor(np.ones((2, 3, 1, 1, 2)))).data
    np.testing.assert_array_equal(out, f[:, :, :, 0, 0])


def test_uniform_weights_average_views_and_scales(rng):
    f = rng.normal(size=(2, 3, 2, 3, 2, 4))
    out = fuse_view_scale(Tensor(f), Tensor(np.full((2, 3, 3, 2, 2), 1 / 6))).data
    np.testing.assert_allclose(out, f.mean(axis=(3, 4)), atol=1e-12)


def test_group_weights_match_loop_oracle(rng):
    m, k, nt, n, s, c, g = 2, 2, 2, 3, 2, 6, 3
    f, w = rng.normal(size=(m, k, nt, n, s, c)), rng.random(size=(m, k, n, s, g))
    out = fuse_view_scale(Tensor(f), Tensor(w)).data
    expected = np.zeros((m, k, nt, c))
    for i in range(m):
        for j in range(k):
            for t in range(nt):
                for ch in range(c):
                    grp = ch // (c // g)
                    expected[i, j, t, ch] = sum(w[i, j, a, b, grp] * f[i, j, t, a, b, ch]
                                                for a in range(n) for b in range(s))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_view_scale_shape_errors(rng):
    with pytest.raises(DimensionError):
        fuse_view_scale(Tensor(np.zeros((1, 1, 1, 2, 1, 4))), Tensor(np.zeros((1, 1, 1, 1, 2))))
    with pytest.raises(DimensionError):
        fuse_view_scale(Tensor(np.zeros((1, 1, 1, 1, 1, 5))), Tensor(np.zeros((1, 1, 1, 1, 2))))


def test_single_frame_temporal_fold_is_passthrough(rng):
    fp = rng.normal(size=(2, 3, 1, 4))
    out = fuse_temporal(Tensor(fp), Linear(8, 4, rng, F64)).data
    np.testing.assert_array_equal(out, fp[:, :, 0])


def test_temporal_fold_oldest_first(rng):
    fp = rng.normal(size=(2, 3, 3, 4))
    psi = Linear(8, 4, rng, F64)
    wt, b = psi.weight.data, psi.bias.data
    h = fp[:, :, 0]
    for t in (1, 2):
        h = np.concatenate([fp[:, :, t], h], axis=2) @ wt + b
    np.testing.assert_allclose(fuse_temporal(Tensor(fp), psi).data, h, atol=1e-12)


def test_detached_history_frame_gets_no_gradient(rng):
    fp = Tensor(rng.normal(size=(1, 2, 3, 4)), requires_grad=True)
    psi = Linear(8, 4, rng, F64)
    T.backward(T.sum(fuse_temporal(fp, psi, detach=[True, False, True])))
    np.testing.assert_array_equal(fp.grad[:, :, 0], 0.0)
    assert np.abs(fp.grad[:, :, 1]).sum() > 0
    assert np.abs(fp.grad[:, :, 2]).sum() > 0  # the current frame is never detached


def test_temporal_layer_shape_checked(rng):
    with pytest.raises(DimensionError):
        fuse_temporal(Tensor(np.zeros((1, 1, 2, 4))), Linear(4, 4, rng, F64))


def test_keypoint_fusion_is_sum(rng):
    x = rng.normal(size=(3, 5, 4))
    np.testing.assert_allclose(fuse_keypoints(Tensor(x)).data, x.sum(axis=1))


def test_bin_centers():
    np.testing.assert_allclose(bin_centers(1.0, 60.0, 60), np.arange(1.0, 61.0))
    with pytest.raises(ConfigError):
        bin_centers(5.0, 5.0, 10)
    with pytest.raises(ConfigError):
        bin_centers(1.0, 5.0, 1)


def test_interp_rows_exact_at_bins_and_clamped(rng):
    vals = rng.random(size=(3, 5))
    out = interp_rows(Tensor(vals), Tensor(np.array([2.0, -4.0, 9.0]))).data
    np.testing.assert_allclose(out, [vals[0, 2], vals[1, 0], vals[2, 4]])
    mid = interp_rows(Tensor(vals), Tensor(np.array([1.25, 3.5, 0.75]))).data
    np.testing.assert_allclose(mid, [0.75 * vals[0, 1] + 0.25 * vals[0, 2], (vals[1, 3] + vals[1, 4]) / 2,
                                     0.25 * vals[2, 0] + 0.75 * vals[2, 1]])


def test_clamped_positions_get_no_gradient(rng):
    vals = Tensor(rng.random(size=(2, 4)))
    pos = Tensor(np.array([-1.0, 7.0]), requires_grad=True)
    T.backward(T.sum(interp_rows(vals, pos)))
    np.testing.assert_array_equal(pos.grad, 0.0)


@given(st.floats(-5, 80))
def test_depth_target_is_a_distribution_centred_on_r(r):
    tgt = depth_target(r, 1.0, 60.0, 60)[0]
    assert tgt.sum() == pytest.approx(1.0) and (tgt >= 0).all() and np.count_nonzero(tgt) <= 2
    assert tgt @ bin_centers(1.0, 60.0, 60) == pytest.approx(np.clip(r, 1.0, 60.0))


def test_confidence_reads_probability_at_anchor_range():
    probs = np.zeros((2, 5))
    probs[0, 2] = 1.0
    probs[1, 1:3] = 0.5
    anchors = np.zeros((2, 11))
    anchors[0, :2] = (3.0, 4.0)  # range 5 -> bin 2 of [1, 9]
    anchors[1, :2] = (0.0, 4.0)  # range 4 -> 1.5 bins
    conf = sample_confidence(Tensor(probs), Tensor(anchors), 1.0, 9.0).data
    np.testing.assert_allclose(conf, [1.0, 0.5])


def test_reweight_scales_rows(rng):
    f = rng.normal(size=(3, 4))
    out = depth_reweight(Tensor(f), Tensor(np.array([1.0, 0.0, 0.5]))).data
    np.testing.assert_allclose(out, f * [[1.0], [0.0], [0.5]])


def test_depth_net_outputs_distributions(rng):
    net = DepthNet(8, 6, 2, rng, F64)
    p = net(Tensor(rng.normal(size=(4, 8)))).data
    assert p.shape == (4, 6)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert len(list(net.named_parameters())) == 2 * 2 * 2 + 2

