"""Depth-modulated image U-net for detail restoration.

Every conv block's activation is modulated by scale/bias fields predicted
from the rendered depth map with 1x1 convs: F~ = (1 + gamma(D)) * F + beta(D).
The output is a residual on the coarse image; with the zero-initialized head
the module is exactly the identity (after clamping) before training.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DepthModulator:
    """1x1 conv from the resampled depth map to per-channel (gamma, beta)."""

    def __init__(self, channels: int):
        self.channels = channels
        self.w = Tensor(np.zeros((2 * channels, 1, 1, 1)), requires_grad=True)
        self.b = Tensor(np.zeros(2 * channels), requires_grad=True)

    def parameters(self):
        return [self.w, self.b]

    def modulate(self, feat: Tensor, depth: Tensor) -> Tensor:
        """feat (1,C,H,W), depth (1,1,H,W) already resampled to (H,W)."""
        if feat.data.shape[2:] != depth.data.shape[2:]:
            raise ValueError(
                f"depth {depth.data.shape[2:]} does not match features {feat.data.shape[2:]}")
        gb = T.conv2d(depth, self.w, self.b)
        gamma = gb[:, :self.channels]
        beta = gb[:, self.channels:]
        return (gamma + 1.0) * feat + beta


class _Conv:
    def __init__(self, c_in, c_out, rng, ksize=3, stride=1, zero_init=False):
        fan_in = c_in * ksize * ksize
        if zero_init:
            w = np.zeros((c_out, c_in, ksize, ksize))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, ksize, ksize))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.pad = ksize // 2

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.pad)

    def parameters(self):
        return [self.w, self.b]


class Enhancer:
    """3-level encoder/decoder with skip connections and depth modulation."""

    def __init__(self, channels: tuple[int, int, int] = (16, 32, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        c0, c1, c2 = channels
        self.channels = channels
        self.enc1 = _Conv(3, c0, rng)
        self.down1 = _Conv(c0, c1, rng, stride=2)
        self.enc2 = _Conv(c1, c1, rng)
        self.down2 = _Conv(c1, c2, rng, stride=2)
        self.bott = _Conv(c2, c2, rng)
        self.up2 = _Conv(c2, c1, rng)
        self.fuse2 = _Conv(2 * c1, c1, rng)
        self.up1 = _Conv(c1, c0, rng)
        self.fuse1 = _Conv(2 * c0, c0, rng)
        self.head = _Conv(c0, 3, rng, ksize=1, zero_init=True)
        self._convs = [self.enc1, self.down1, self.enc2, self.down2, self.bott,
                       self.up2, self.fuse2, self.up1, self.fuse1]
        self.mods = [DepthModulator(c) for c in
                     (c0, c1, c1, c2, c2, c1, c1, c0, c0)]

    def parameters(self) -> list[Tensor]:
        out = []
        for conv in self._convs + [self.head]:
            out.extend(conv.parameters())
        for mod in self.mods:
            out.extend(mod.parameters())
        return out

    def param_dict(self) -> dict[str, Tensor]:
        names = ["enc1", "down1", "enc2", "down2", "bott", "up2", "fuse2",
                 "up1", "fuse1"]
        d = {}
        for name, conv in zip(names + ["head"], self._convs + [self.head]):
            d[f"{name}.w"] = conv.w
            d[f"{name}.b"] = conv.b
        for i, mod in enumerate(self.mods):
            d[f"mod{i}.w"] = mod.w
            d[f"mod{i}.b"] = mod.b
        return d

    def receptive_field_radius(self) -> int:
        """Upper bound on how far (in pixels) one input pixel can reach."""
        # conv radii times their jump, plus one coarse pixel of slack per
        # bilinear resample (executed at jumps 4 and 2)
        radius = (1 * 1 + 1 * 1 + 1 * 2 + 1 * 2 + 1 * 4   # enc1..bott
                  + 1 * 4 + 1 * 2                          # up2 conv, fuse2
                  + 1 * 2 + 1 * 1)                         # up1 conv, fuse1
        radius += 4 + 2
        return radius

    def enhance(self, coarse: Tensor, depth: Tensor, near: float, far: float) -> Tensor:
        """coarse (H,W,3) in [0,1], depth (H,W) view-space -> refined (H,W,3).

        Depth is normalized by the frame's near/far planes so the modulation
        fields stay temporally stable.
        """
        h, w = coarse.data.shape[0], coarse.data.shape[1]
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(f"resolution {w}x{h} not divisible by 4")
        dn = T.clip((depth - near) * (1.0 / (far - near)), 0.0, 1.0)
        d0 = dn.reshape(1, 1, h, w)
        d1 = T.resample2d(d0, h // 2, w // 2, mode="bilinear")
        d2 = T.resample2d(d0, h // 4, w // 4, mode="bilinear")

        x = T.transpose(coarse, (2, 0, 1)).reshape(1, 3, h, w)
        m = self.mods
        a1 = T.elu(m[0].modulate(self.enc1(x), d0))
        x1 = T.elu(m[1].modulate(self.down1(a1), d1))
        a2 = T.elu(m[2].modulate(self.enc2(x1), d1))
        x2 = T.elu(m[3].modulate(self.down2(a2), d2))
        # convolve at the coarse level, then upsample (cheaper, same RF bound)
        bt = T.elu(m[4].modulate(self.bott(x2), d2))
        u2 = T.resample2d(T.elu(m[5].modulate(self.up2(bt), d2)), h // 2, w // 2,
                          mode="bilinear")
        u2 = T.elu(m[6].modulate(self.fuse2(T.concat([u2, a2], axis=1)), d1))
        u1 = T.resample2d(T.elu(m[7].modulate(self.up1(u2), d1)), h, w,
                          mode="bilinear")
        u1 = T.elu(m[8].modulate(self.fuse1(T.concat([u1, a1], axis=1)), d0))
        residual = self.head(u1)
        out = coarse + T.transpose(residual.reshape(3, h, w), (1, 2, 0))
        return T.clip(out, 0.0, 1.0)
