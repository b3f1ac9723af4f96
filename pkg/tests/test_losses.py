import numpy as np
import pytest

from meshsplat import tensor as T
from meshsplat.gradcheck import finite_diff_check
from meshsplat.losses import (LossWeights, d_ssim, l1, loss_coarse, loss_final,
                              loss_weight, metrics, perceptual_proxy, ssim,
                              total_loss)
from meshsplat.tensor import Tensor


def scalar_ssim_oracle(a, b):
    """Straightforward per-window SSIM, independent of the conv path."""
    half = 11 // 2
    x = np.arange(11) - half
    g = np.exp(-(x * x) / (2.0 * 1.5 ** 2))
    g /= g.sum()
    win = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w, c = a.shape
    vals = []
    for ch in range(c):
        for i in range(h - 10):
            for j in range(w - 10):
                pa = a[i:i + 11, j:j + 11, ch]
                pb = b[i:i + 11, j:j + 11, ch]
                mx = (win * pa).sum()
                my = (win * pb).sum()
                sxx = (win * pa * pa).sum() - mx * mx
                syy = (win * pb * pb).sum() - my * my
                sxy = (win * pa * pb).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * sxy + c2))
                            / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return float(np.mean(vals))


def test_ssim_identity():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(16, 16, 3))
    assert float(ssim(x, x).data) == pytest.approx(1.0, abs=1e-12)
    assert float(d_ssim(x, x).data) == pytest.approx(0.0, abs=1e-12)


def test_ssim_checkerboard_negative():
    i, j = np.mgrid[0:16, 0:16]
    cb = ((i + j) % 2).astype(np.float64)[:, :, None] * np.ones((1, 1, 3))
    assert float(ssim(cb, 1.0 - cb).data) < 0.0


def test_ssim_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(16, 16, 3))
    b = rng.uniform(size=(16, 16, 3))
    got = float(ssim(a, b).data)
    assert got == pytest.approx(scalar_ssim_oracle(a, b), abs=1e-9)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_proxy_identity_and_symmetry():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(16, 16, 3))
    b = rng.uniform(size=(16, 16, 3))
    assert float(perceptual_proxy(a, a).data) == 0.0
    assert float(perceptual_proxy(a, b).data) == pytest.approx(
        float(perceptual_proxy(b, a).data), abs=1e-15)
    assert float(perceptual_proxy(a, b).data) > 0.0


def test_proxy_penalizes_blur_beyond_l1():
    # sharp step edge vs its blurred version: the proxy/L1 ratio must exceed 1
    h = w = 16
    sharp = np.zeros((h, w, 3))
    sharp[:, w // 2:] = 1.0
    blurred = sharp.copy()
    k = np.array([0.25, 0.5, 0.25])
    for _ in range(2):
        blurred = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, blurred)
    ratio = float(perceptual_proxy(sharp, blurred).data) / float(l1(sharp, blurred).data)
    assert ratio > 1.0


def test_loss_final_zero_on_identity_and_weights():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(16, 16, 3))
    assert float(loss_final(x, x).data) == pytest.approx(0.0, abs=1e-12)
    w = LossWeights()
    assert (w.lam, w.lam_perc, w.lam_f, w.lam_c, w.lam_w) == (0.2, 0.1, 1.0, 0.1, 0.1)


def test_loss_final_lambda_zero_reduces_to_l1_plus_proxy():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(16, 16, 3))
    b = rng.uniform(size=(16, 16, 3))
    w = LossWeights(lam=0.0)
    expected = float(l1(a, b).data) + 0.1 * float(perceptual_proxy(a, b).data)
    assert float(loss_final(a, b, w).data) == pytest.approx(expected, abs=1e-12)


def test_loss_coarse_properties():
    rng = np.random.default_rng(5)
    a = rng.uniform(size=(16, 16, 3))
    b = rng.uniform(size=(16, 16, 3))
    assert float(loss_coarse(a, a).data) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_coarse(a, b).data) > 0.0


def test_loss_weight_values():
    m = np.zeros((8, 8))
    m[2:6, 2:6] = 1.0
    assert float(loss_weight(m, m).data) <= 2e-6
    half = np.full((8, 8), 0.5)
    assert float(loss_weight(half, m).data) == pytest.approx(np.log(2.0), abs=1e-12)


def test_loss_weight_gradient_sign():
    m = np.zeros((4, 4))
    m[:2] = 1.0
    w = Tensor(np.full((4, 4), 0.5), requires_grad=True)
    grads = T.backward(loss_weight(w, m), params=[w])
    # gradient descends toward the mask: negative where mask is 1
    assert np.all(grads[w][:2] < 0)
    assert np.all(grads[w][2:] > 0)


def test_total_loss_linear_and_defaults():
    a, b, c = Tensor(2.0), Tensor(3.0), Tensor(5.0)
    w = LossWeights()
    out = float(total_loss(a, b, c, w).data)
    assert out == pytest.approx(1.0 * 2.0 + 0.1 * 3.0 + 0.1 * 5.0, abs=1e-15)
    assert float(total_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), w).data) == 0.0
    assert float(total_loss(a * 2.0, b, c, w).data) == pytest.approx(
        out + 2.0, abs=1e-12)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(lam_w=-0.1)


def test_metrics_identity_and_analytic():
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(16, 16, 3))
    m = metrics(x, x)
    assert m["l2"] == 0.0
    assert m["psnr"] == 99.0
    gray = np.full((16, 16, 3), 0.5)
    black = np.zeros((16, 16, 3))
    m2 = metrics(gray, black)
    assert m2["l2"] == pytest.approx(0.25, abs=1e-15)
    assert m2["psnr"] == pytest.approx(10 * np.log10(4.0), abs=1e-9)


def test_psnr_consistency_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = rng.uniform(size=(12, 12, 3))
        b = rng.uniform(size=(12, 12, 3))
        m = metrics(a, b)
        assert m["psnr"] == pytest.approx(-10 * np.log10(m["l2"]), abs=1e-9)


def test_losses_gradcheck_16x16():
    rng = np.random.default_rng(8)
    a = Tensor(rng.uniform(0.2, 0.8, size=(16, 16, 3)), requires_grad=True)
    b = Tensor(rng.uniform(0.2, 0.8, size=(16, 16, 3)))
    w = Tensor(rng.uniform(0.2, 0.8, size=(16, 16)), requires_grad=True)
    mask = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float64)

    def forward():
        return (loss_final(a, b) + loss_coarse(a, b)
                + loss_weight(w, mask))

    # probe a subset of coordinates via small slices to stay fast
    res = finite_diff_check(forward, [a, w], step=1e-6)
    assert res.max_rel_error < 1e-5, res
