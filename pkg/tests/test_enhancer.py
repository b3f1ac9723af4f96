import numpy as np
import pytest

from meshsplat import tensor as T
from meshsplat.enhancer import DepthModulator, Enhancer
from meshsplat.gradcheck import finite_diff_check
from meshsplat.tensor import Tensor


def test_modulate_zero_init_is_identity():
    mod = DepthModulator(4)
    rng = np.random.default_rng(0)
    f = Tensor(rng.normal(size=(1, 4, 6, 6)))
    d = Tensor(rng.uniform(size=(1, 1, 6, 6)))
    out = mod.modulate(f, d)
    assert np.array_equal(out.data, f.data)


def test_modulate_constant_depth_is_per_channel_affine():
    mod = DepthModulator(3)
    rng = np.random.default_rng(1)
    mod.w.data[:] = rng.normal(size=mod.w.data.shape)
    mod.b.data[:] = rng.normal(size=3 * 2)
    f = Tensor(rng.normal(size=(1, 3, 5, 5)))
    d = Tensor(np.full((1, 1, 5, 5), 0.7))
    out = mod.modulate(f, d).data
    gamma = (mod.w.data[:3, 0, 0, 0] * 0.7 + mod.b.data[:3])
    beta = (mod.w.data[3:, 0, 0, 0] * 0.7 + mod.b.data[3:])
    expected = (1 + gamma)[None, :, None, None] * f.data + beta[None, :, None, None]
    assert np.allclose(out, expected)


def test_modulate_shape_mismatch():
    mod = DepthModulator(2)
    with pytest.raises(ValueError, match="does not match"):
        mod.modulate(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 1, 8, 8))))


def test_modulate_gradient_wrt_depth_nonzero():
    mod = DepthModulator(2)
    rng = np.random.default_rng(2)
    mod.w.data[:] = rng.normal(0, 0.5, size=mod.w.data.shape)
    f = Tensor(rng.normal(size=(1, 2, 8, 8)))
    d = Tensor(rng.uniform(size=(1, 1, 8, 8)), requires_grad=True)
    res = finite_diff_check(lambda: T.tmean(mod.modulate(f, d) ** 2), [d], step=1e-6)
    assert res.max_rel_error < 1e-6
    grads = T.backward(T.tmean(mod.modulate(f, d) ** 2), params=[d])
    assert np.any(grads[d] != 0.0)


def test_enhancer_identity_at_init():
    enh = Enhancer(seed=0)
    rng = np.random.default_rng(3)
    img = Tensor(rng.uniform(size=(16, 16, 3)))
    depth = Tensor(rng.uniform(1.0, 5.0, size=(16, 16)))
    out = enh.enhance(img, depth, near=0.5, far=6.0)
    assert np.array_equal(out.data, np.clip(img.data, 0.0, 1.0))


def test_enhancer_output_shape_and_range():
    enh = Enhancer(seed=1)
    rng = np.random.default_rng(4)
    for p in enh.parameters():
        p.data += rng.normal(0, 0.05, size=p.data.shape)
    img = Tensor(rng.uniform(size=(24, 32, 3)))
    depth = Tensor(rng.uniform(1.0, 5.0, size=(24, 32)))
    out = enh.enhance(img, depth, near=0.5, far=6.0)
    assert out.data.shape == (24, 32, 3)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_enhancer_resolution_divisibility():
    enh = Enhancer(seed=0)
    img = Tensor(np.zeros((15, 16, 3)))
    depth = Tensor(np.ones((15, 16)))
    with pytest.raises(ValueError, match="divisible by 4"):
        enh.enhance(img, depth, near=0.5, far=6.0)


def test_enhancer_receptive_field_impulse():
    enh = Enhancer(seed=2)
    rng = np.random.default_rng(5)
    for p in enh.parameters():
        p.data += rng.normal(0, 0.1, size=p.data.shape)
    h = w = 64
    base = np.full((h, w, 3), 0.5)
    depth = Tensor(np.full((h, w), 2.0))
    with T.no_grad():
        out0 = enh.enhance(Tensor(base), depth, near=0.5, far=6.0).data
        poked = base.copy()
        poked[32, 32] += 0.25
        out1 = enh.enhance(Tensor(poked), depth, near=0.5, far=6.0).data
    diff = np.abs(out1 - out0).sum(axis=2)
    yy, xx = np.nonzero(diff > 1e-12)
    radius = enh.receptive_field_radius()
    dist = np.maximum(np.abs(yy - 32), np.abs(xx - 32))
    assert dist.max() <= radius, (dist.max(), radius)


def test_enhancer_gradcheck_small():
    enh = Enhancer(channels=(2, 3, 4), seed=3)
    rng = np.random.default_rng(6)
    for p in enh.parameters():
        p.data += rng.normal(0, 0.1, size=p.data.shape)
    img = Tensor(rng.uniform(0.2, 0.8, size=(8, 8, 3)), requires_grad=True)
    depth = Tensor(rng.uniform(1.0, 5.0, size=(8, 8)), requires_grad=True)

    def forward():
        return T.tmean(enh.enhance(img, depth, near=0.5, far=6.0) ** 2)

    params = [img, depth, enh.bott.w, enh.mods[4].w, enh.head.w]
    res = finite_diff_check(forward, params, step=1e-6)
    assert res.max_rel_error < 1e-4, res
