"""Training losses and evaluation metrics for (H, W, 3) images in [0, 1].

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, C1=0.01^2,
C2=0.03^2), averaged over valid window positions and channels. The
perceptual proxy replaces a pretrained LPIPS network with a deterministic
differentiable surrogate: L1 of Sobel gradients plus L1 of 2x and 4x
block-downsampled images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lam: float = 0.2        # D-SSIM mix inside the image loss
    lam_perc: float = 0.1   # perceptual proxy weight
    lam_f: float = 1.0      # final image loss
    lam_c: float = 0.1      # coarse image loss
    lam_w: float = 0.1      # weight-map cross entropy

    def __post_init__(self):
        for name in ("lam", "lam_perc", "lam_f", "lam_c", "lam_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


_GAUSS_1D = _gaussian_kernel()


def _as_chw(img) -> Tensor:
    img = img if isinstance(img, Tensor) else Tensor(img)
    return T.transpose(img, (2, 0, 1))


def _blur(x: Tensor) -> Tensor:
    return T.filter2d_separable(x, _GAUSS_1D, _GAUSS_1D)


def ssim(a, b) -> Tensor:
    """Mean SSIM over valid window positions, averaged over channels."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError("ssim inputs must share a shape")
    if a.data.shape[0] < SSIM_WINDOW or a.data.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x, y = _as_chw(a), _as_chw(b)
    mu_x = _blur(x)
    mu_y = _blur(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sig_xx = _blur(x * x) - mu_xx
    sig_yy = _blur(y * y) - mu_yy
    sig_xy = _blur(x * y) - mu_xy
    num = (mu_xy * 2.0 + SSIM_C1) * (sig_xy * 2.0 + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (sig_xx + sig_yy + SSIM_C2)
    return T.tmean(num / den)


def d_ssim(a, b) -> Tensor:
    return (1.0 - ssim(a, b)) * 0.5


_SOBEL_SMOOTH = np.array([1.0, 2.0, 1.0]) / 4.0
_SOBEL_DIFF = np.array([-1.0, 0.0, 1.0]) / 2.0


def _sobel_xy(img_chw: Tensor) -> tuple[Tensor, Tensor]:
    gx = T.filter2d_separable(img_chw, _SOBEL_SMOOTH, _SOBEL_DIFF)
    gy = T.filter2d_separable(img_chw, _SOBEL_DIFF, _SOBEL_SMOOTH)
    return gx, gy


def perceptual_proxy(a, b) -> Tensor:
    """Edge- and scale-aware image distance; zero only for identical inputs."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError("perceptual_proxy inputs must share a shape")
    h, w, _ = a.data.shape
    x, y = _as_chw(a), _as_chw(b)
    ax, ay = _sobel_xy(x)
    bx, by = _sobel_xy(y)
    term = (T.tmean(T.absolute(ax - bx)) + T.tmean(T.absolute(ay - by))) * 0.5
    for div in (2, 4):
        xd = T.resample2d(x, h // div, w // div, mode="bilinear")
        yd = T.resample2d(y, h // div, w // div, mode="bilinear")
        term = term + T.tmean(T.absolute(xd - yd))
    return term


def l1(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    return T.tmean(T.absolute(a - b))


def loss_final(pred, target, weights: LossWeights = LossWeights()) -> Tensor:
    return (l1(pred, target) * (1.0 - weights.lam)
            + d_ssim(pred, target) * weights.lam
            + perceptual_proxy(pred, target) * weights.lam_perc)


def loss_coarse(pred, target) -> Tensor:
    return l1(pred, target) + d_ssim(pred, target)


def loss_weight(weight_map, mask) -> Tensor:
    """Binary cross entropy of the accumulated-opacity map against the mask."""
    w = weight_map if isinstance(weight_map, Tensor) else Tensor(weight_map)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    wc = T.clip(w, 1e-6, 1.0 - 1e-6)
    return -T.tmean(T.log(wc) * m + T.log(1.0 - wc) * (1.0 - m))


def total_loss(l_f, l_c, l_w, weights: LossWeights = LossWeights()) -> Tensor:
    zero = Tensor(0.0)
    l_f = l_f if l_f is not None else zero
    l_c = l_c if l_c is not None else zero
    l_w = l_w if l_w is not None else zero
    return l_f * weights.lam_f + l_c * weights.lam_c + l_w * weights.lam_w


def metrics(pred, target) -> dict[str, float]:
    """L2 (mean squared error), PSNR, SSIM, perceptual proxy; numbers only."""
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    g = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    l2 = float(np.mean((p - g) ** 2))
    psnr = 99.0 if l2 < 1e-10 else float(10.0 * np.log10(1.0 / l2))
    with T.no_grad():
        s = float(ssim(Tensor(p), Tensor(g)).data)
        prox = float(perceptual_proxy(Tensor(p), Tensor(g)).data)
    return {"l2": l2, "psnr": psnr, "ssim": s, "proxy": prox}
