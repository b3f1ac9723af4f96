"""Graph-guided refinement of tracked expression and camera-pose parameters.

A temporal MLP embeds normalized time; single-head cross-attention between
the graph bottleneck pair f_g (query) and the temporal tokens (keys/values)
predicts per-frame offsets: expression deltas plus a 6-DoF pose correction
applied through the SO(3) exponential map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .render import Camera
from .tensor import Tensor

TEMPORAL_DIM = 32
ATTN_DIM = 32
N_TOKENS = 4


@dataclass
class TrackingOffsets:
    delta_e: Tensor      # (|e|,)
    omega: Tensor        # (3,) axis-angle, norm < pi by construction
    tau: Tensor          # (3,) translation


class TrackingRefiner:
    """Learnable module producing TrackingOffsets from (f_g, t)."""

    def __init__(self, expr_dim: int, hidden: int = 64, e_bound: float = 0.5,
                 rotation_only: bool = False, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.expr_dim = expr_dim
        self.e_bound = e_bound
        self.rotation_only = rotation_only

        def lin(d_in, d_out, zero=False):
            if zero:
                w = np.zeros((d_in, d_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
            return [Tensor(w, requires_grad=True),
                    Tensor(np.zeros(d_out), requires_grad=True)]

        # temporal MLP on [t, sin 2pi t, cos 2pi t]
        self.t_w1, self.t_b1 = lin(3, hidden)
        self.t_w2, self.t_b2 = lin(hidden, TEMPORAL_DIM)
        # attention projections: query from f_g, key/value token banks from f_t
        self.q_proj, self.q_b = lin(16, ATTN_DIM)
        self.k_proj, self.k_b = lin(TEMPORAL_DIM, N_TOKENS * ATTN_DIM)
        self.v_proj, self.v_b = lin(TEMPORAL_DIM, N_TOKENS * ATTN_DIM)
        # zero-init head: offsets start at exactly zero
        self.head_w, self.head_b = lin(ATTN_DIM, expr_dim + 6, zero=True)

    def parameters(self) -> list[Tensor]:
        return [self.t_w1, self.t_b1, self.t_w2, self.t_b2,
                self.q_proj, self.q_b, self.k_proj, self.k_b,
                self.v_proj, self.v_b, self.head_w, self.head_b]

    def param_dict(self) -> dict[str, Tensor]:
        names = ["t_w1", "t_b1", "t_w2", "t_b2", "q_proj", "q_b", "k_proj",
                 "k_b", "v_proj", "v_b", "head_w", "head_b"]
        return dict(zip(names, self.parameters()))

    def temporal_features(self, t: float, warn=None) -> Tensor:
        if not 0.0 <= t <= 1.0:
            if warn is not None:
                warn(f"normalized time {t} outside [0,1]; clamped")
            t = min(max(t, 0.0), 1.0)
        phase = 2.0 * np.pi * t
        x = Tensor(np.array([t, np.sin(phase), np.cos(phase)]))
        h = T.elu(x @ self.t_w1 + self.t_b1)
        return h @ self.t_w2 + self.t_b2

    def attention_weights(self, f_g: Tensor, f_t: Tensor) -> Tensor:
        q = f_g @ self.q_proj + self.q_b                      # (32,)
        k = (f_t @ self.k_proj + self.k_b).reshape(N_TOKENS, ATTN_DIM)
        scores = (k @ q) * (1.0 / np.sqrt(ATTN_DIM))          # (tokens,)
        return T.softmax(scores, axis=0)

    def predict_offsets(self, f_g: Tensor, f_t: Tensor) -> TrackingOffsets:
        if f_g.data.shape != (16,):
            raise ValueError(f"f_g must be the 16-dim bottleneck pair, got {f_g.data.shape}")
        w = self.attention_weights(f_g, f_t)
        v = (f_t @ self.v_proj + self.v_b).reshape(N_TOKENS, ATTN_DIM)
        attended = w @ v                                      # (32,)
        raw = attended @ self.head_w + self.head_b            # (|e| + 6,)
        delta_e = T.tanh(raw[:self.expr_dim]) * self.e_bound
        omega = bounded_axis_angle(raw[self.expr_dim:self.expr_dim + 3])
        tau = raw[self.expr_dim + 3:]
        if self.rotation_only:
            tau = tau * 0.0
        return TrackingOffsets(delta_e=delta_e, omega=omega, tau=tau)


def bounded_axis_angle(u: Tensor) -> Tensor:
    """Rescale a raw 3-vector so the rotation angle stays strictly below pi.

    omega = u * pi * tanh(|u|) / |u|; smooth at 0 where the factor tends to
    pi. The slight shrink keeps the norm under pi even when tanh saturates
    to 1 and rounding would otherwise land exactly on it.
    """
    norm2 = T.tsum(u * u)
    norm = T.sqrt(norm2 + 1e-24)
    factor = T.tanh(norm) / norm * (np.pi * (1.0 - 1e-9))
    return u * factor


def so3_exp(omega: Tensor) -> Tensor:
    """Rodrigues formula, second-order Taylor below 1e-8 angle."""
    omega = omega if isinstance(omega, Tensor) else Tensor(omega)
    theta2 = T.tsum(omega * omega)
    theta = T.sqrt(theta2 + 1e-300)
    small = float(theta.data) < 1e-8
    if small:
        a = 1.0 - theta2 * (1.0 / 6.0)          # sin(t)/t
        b = 0.5 - theta2 * (1.0 / 24.0)         # (1-cos t)/t^2
    else:
        a = T.sin(theta) / theta
        b = (1.0 - T.cos(theta)) / theta2
    wx, wy, wz = omega[0], omega[1], omega[2]
    zero = wx * 0.0
    hat = T.stack([zero, -wz, wy, wz, zero, -wx, -wy, wx, zero], axis=0).reshape(3, 3)
    eye = Tensor(np.eye(3))
    return eye + hat * a + (hat @ hat) * b


def apply_offsets(camera: Camera, expr, offsets: TrackingOffsets):
    """Refined (camera', e'): rotation pre-multiplied, translation shifted."""
    expr_t = expr if isinstance(expr, Tensor) else Tensor(expr)
    e_new = expr_t + offsets.delta_e
    r_delta = so3_exp(offsets.omega)
    cam_new = camera.with_pose(r_delta @ camera.rotation,
                               camera.translation + offsets.tau)
    return cam_new, e_new
