import numpy as np
import pytest

from meshsplat import tensor as T
from meshsplat.gradcheck import finite_diff_check
from meshsplat.render import Camera
from meshsplat.tensor import Tensor
from meshsplat.tracking import (TrackingRefiner, apply_offsets, bounded_axis_angle,
                                so3_exp)


def make_camera():
    return Camera(rotation=np.eye(3), translation=np.array([0.0, 0.0, 1.0]),
                  fx=30.0, fy=30.0, cx=8.0, cy=8.0, width=16, height=16,
                  near=0.1, far=10.0)


def test_temporal_features_deterministic():
    ref = TrackingRefiner(expr_dim=4, seed=0)
    a = ref.temporal_features(0.3)
    b = ref.temporal_features(0.3)
    assert np.array_equal(a.data, b.data)
    assert a.data.shape == (32,)


def test_temporal_features_t0_vs_t1_differ():
    ref = TrackingRefiner(expr_dim=4, seed=0)
    a = ref.temporal_features(0.0)
    b = ref.temporal_features(1.0)
    # sin/cos wrap but the raw t channel differs
    assert not np.allclose(a.data, b.data)


def test_temporal_features_clamps_with_warning():
    ref = TrackingRefiner(expr_dim=4, seed=0)
    warnings = []
    out = ref.temporal_features(1.7, warn=warnings.append)
    assert warnings
    assert np.array_equal(out.data, ref.temporal_features(1.0).data)


def test_temporal_mlp_gradcheck():
    ref = TrackingRefiner(expr_dim=4, seed=1)

    def forward():
        return T.tmean(ref.temporal_features(0.37) ** 2)

    res = finite_diff_check(forward, [ref.t_w1, ref.t_b1, ref.t_w2, ref.t_b2],
                            step=1e-6)
    assert res.max_rel_error < 1e-6


def test_zero_init_head_gives_zero_offsets():
    ref = TrackingRefiner(expr_dim=5, seed=2)
    f_g = Tensor(np.random.default_rng(0).normal(size=16))
    off = ref.predict_offsets(f_g, ref.temporal_features(0.5))
    assert np.array_equal(off.delta_e.data, np.zeros(5))
    assert np.array_equal(off.omega.data, np.zeros(3))
    assert np.array_equal(off.tau.data, np.zeros(3))


def test_attention_weights_sum_to_one():
    ref = TrackingRefiner(expr_dim=4, seed=3)
    rng = np.random.default_rng(1)
    f_g = Tensor(rng.normal(size=16))
    w = ref.attention_weights(f_g, ref.temporal_features(0.2))
    assert w.data.sum() == pytest.approx(1.0)
    assert np.all(w.data > 0)


def test_offsets_bounded():
    ref = TrackingRefiner(expr_dim=4, e_bound=0.5, seed=4)
    rng = np.random.default_rng(2)
    # blow up the head so the bounds are actually exercised
    ref.head_w.data[:] = rng.normal(0, 50.0, size=ref.head_w.data.shape)
    f_g = Tensor(rng.normal(size=16))
    off = ref.predict_offsets(f_g, ref.temporal_features(0.8))
    assert np.abs(off.delta_e.data).max() <= 0.5
    assert np.linalg.norm(off.omega.data) < np.pi


def test_predict_offsets_gradcheck():
    ref = TrackingRefiner(expr_dim=3, seed=5)
    rng = np.random.default_rng(3)
    ref.head_w.data[:] = rng.normal(0, 0.1, size=ref.head_w.data.shape)
    f_g = Tensor(rng.normal(size=16), requires_grad=True)

    def forward():
        off = ref.predict_offsets(f_g, ref.temporal_features(0.41))
        return (T.tmean(off.delta_e ** 2) + T.tmean(off.omega ** 2)
                + T.tmean(off.tau ** 2))

    res = finite_diff_check(forward, [f_g, ref.q_proj, ref.k_proj, ref.head_b],
                            step=1e-6)
    assert res.max_rel_error < 1e-5, res


def test_f_g_dimension_checked():
    ref = TrackingRefiner(expr_dim=3, seed=0)
    with pytest.raises(ValueError, match="16-dim"):
        ref.predict_offsets(Tensor(np.zeros(8)), ref.temporal_features(0.1))


# -- so3 ------------------------------------------------------------------------


def test_so3_zero_is_identity():
    r = so3_exp(Tensor(np.zeros(3)))
    assert np.allclose(r.data, np.eye(3))


def test_so3_quarter_turn_about_z():
    r = so3_exp(Tensor(np.array([0.0, 0.0, np.pi / 2])))
    assert np.allclose(r.data @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)


def test_so3_orthonormal_random():
    rng = np.random.default_rng(4)
    for _ in range(20):
        r = so3_exp(Tensor(rng.normal(0, 1.0, size=3))).data
        assert np.abs(r @ r.T - np.eye(3)).max() < 1e-12
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_so3_small_angle_branch():
    r = so3_exp(Tensor(np.array([1e-10, 0.0, 0.0]))).data
    assert np.abs(r - np.eye(3)).max() < 1e-9
    assert np.abs(r @ r.T - np.eye(3)).max() < 1e-15


def test_so3_gradcheck():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(0, 0.5, size=3), requires_grad=True)
    res = finite_diff_check(lambda: T.tmean(so3_exp(w) ** 2), [w], step=1e-6)
    assert res.max_rel_error < 1e-6


def test_bounded_axis_angle_limits():
    big = bounded_axis_angle(Tensor(np.array([100.0, -40.0, 3.0])))
    assert np.linalg.norm(big.data) < np.pi
    small = bounded_axis_angle(Tensor(np.array([1e-3, 0.0, 0.0])))
    # near zero the map is ~ pi * u
    assert small.data[0] == pytest.approx(np.pi * 1e-3, rel=1e-4)


# -- apply --------------------------------------------------------------------------


def test_apply_zero_offsets_identity():
    ref = TrackingRefiner(expr_dim=4, seed=6)
    cam = make_camera()
    e = np.array([0.1, 0.2, 0.3, 0.4])
    off = ref.predict_offsets(Tensor(np.zeros(16)), ref.temporal_features(0.0))
    cam2, e2 = apply_offsets(cam, e, off)
    assert np.array_equal(cam2.rotation.data, cam.rotation.data)
    assert np.array_equal(cam2.translation.data, cam.translation.data)
    assert np.array_equal(e2.data, e)


def test_apply_rotation_roundtrip():
    from meshsplat.tracking import TrackingOffsets
    cam = make_camera()
    w = np.array([0.3, -0.2, 0.5])
    fwd = TrackingOffsets(delta_e=Tensor(np.zeros(2)), omega=Tensor(w),
                          tau=Tensor(np.zeros(3)))
    bwd = TrackingOffsets(delta_e=Tensor(np.zeros(2)), omega=Tensor(-w),
                          tau=Tensor(np.zeros(3)))
    cam1, _ = apply_offsets(cam, np.zeros(2), fwd)
    cam2, _ = apply_offsets(cam1, np.zeros(2), bwd)
    assert np.abs(cam2.rotation.data - cam.rotation.data).max() < 1e-10


def test_rotation_only_mode():
    ref = TrackingRefiner(expr_dim=2, rotation_only=True, seed=7)
    rng = np.random.default_rng(8)
    ref.head_w.data[:] = rng.normal(0, 1.0, size=ref.head_w.data.shape)
    off = ref.predict_offsets(Tensor(rng.normal(size=16)), ref.temporal_features(0.6))
    assert np.array_equal(off.tau.data, np.zeros(3))
    assert np.any(off.omega.data != 0.0)
