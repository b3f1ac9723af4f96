"""Chebyshev graph convolutions and the geometric/appearance graph U-nets.

Each U-net encodes per-vertex [position, normal] features through two
conv+downsample stages to an 8-dim bottleneck, concatenates the expression
code, and decodes back to full vertex count through mirrored conv+upsample
stages. Role-specific heads emit raw attributes that activation maps turn
into Gaussian parameters.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .clouds import GaussianCloud, normalize_rows, scale_activation
from .meshes import (GraphOperators, SamplingHierarchy, TriMesh, apply_sampling,
                     vertex_normals)
from .tensor import Tensor

MAX_CHEB_ORDER = 16
BOTTLENECK_DIM = 8


class NumericsError(RuntimeError):
    """Raised when a forward pass produces non-finite values."""


class ChebLayer:
    """Degree-K Chebyshev filter bank: theta (K, F_in, F_out) plus bias."""

    def __init__(self, k: int, f_in: int, f_out: int, rng=None, zero_init: bool = False):
        if k < 1:
            raise ValueError("Chebyshev order must be >= 1")
        if k > MAX_CHEB_ORDER:
            raise ValueError(f"Chebyshev order {k} exceeds the configured max {MAX_CHEB_ORDER}")
        self.k = k
        if zero_init:
            theta = np.zeros((k, f_in, f_out))
        else:
            scale = 1.0 / np.sqrt(k * f_in)
            theta = rng.normal(0.0, scale, size=(k, f_in, f_out))
        self.theta = Tensor(theta, requires_grad=True)
        self.bias = Tensor(np.zeros(f_out), requires_grad=True)

    def parameters(self):
        return [self.theta, self.bias]


def cheb_conv(x, ops: GraphOperators, layer: ChebLayer):
    """y = sum_k T_k(L~) x theta_k + bias with the standard recurrence."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.shape[0] != ops.n:
        raise ValueError(f"feature rows {x.data.shape[0]} do not match graph size {ops.n}")
    lap = ops.scaled_laplacian
    t_prev2 = x
    y = x @ layer.theta[0]
    if layer.k > 1:
        t_prev = T.sparse_matmul(lap, x)
        y = y + t_prev @ layer.theta[1]
        for k in range(2, layer.k):
            t_k = T.sparse_matmul(lap, t_prev) * 2.0 - t_prev2
            y = y + t_k @ layer.theta[k]
            t_prev2, t_prev = t_prev, t_k
    return y + layer.bias


class GraphUnet:
    """Encoder-bottleneck-decoder over the mesh sampling hierarchy.

    ``out_width`` is the per-vertex head width (10 geometric, 4 appearance
    in RGB mode). Skip connections across the bottleneck exist behind
    ``use_skips`` but default off.
    """

    def __init__(self, ops: GraphOperators, hierarchy: SamplingHierarchy,
                 out_width: int, expr_dim: int, k: int = 6,
                 widths: tuple[int, int] = (16, 32), use_skips: bool = False,
                 seed: int = 0):
        if hierarchy.levels < 2:
            raise ValueError("GraphUnet needs a 2-level sampling hierarchy")
        rng = np.random.default_rng(seed)
        self.ops = ops
        self.hier = hierarchy
        self.expr_dim = expr_dim
        self.use_skips = use_skips
        w0, w1 = widths
        n2 = hierarchy.meshes[1].n_vertices

        self.enc1 = ChebLayer(k, 6, w0, rng)
        self.enc2 = ChebLayer(k, w0, w1, rng)
        self.bottleneck_w = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(n2 * w1), size=(n2 * w1, BOTTLENECK_DIM)),
            requires_grad=True)
        self.bottleneck_b = Tensor(np.zeros(BOTTLENECK_DIM), requires_grad=True)
        self.entry_w = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(BOTTLENECK_DIM + expr_dim),
                       size=(BOTTLENECK_DIM + expr_dim, n2 * w1)),
            requires_grad=True)
        self.entry_b = Tensor(np.zeros(n2 * w1), requires_grad=True)
        self.dec1 = ChebLayer(k, w1, w1, rng)
        self.dec2 = ChebLayer(k, w1 + (w1 if use_skips else 0), w0, rng)
        self.head = ChebLayer(k, w0 + (w0 if use_skips else 0), out_width,
                              rng, zero_init=True)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in (self.enc1, self.enc2, self.dec1, self.dec2, self.head):
            out.extend(layer.parameters())
        out += [self.bottleneck_w, self.bottleneck_b, self.entry_w, self.entry_b]
        return out

    def param_dict(self) -> dict[str, Tensor]:
        d = {}
        for name, layer in (("enc1", self.enc1), ("enc2", self.enc2),
                            ("dec1", self.dec1), ("dec2", self.dec2),
                            ("head", self.head)):
            d[f"{name}.theta"] = layer.theta
            d[f"{name}.bias"] = layer.bias
        d["bottleneck.w"] = self.bottleneck_w
        d["bottleneck.b"] = self.bottleneck_b
        d["entry.w"] = self.entry_w
        d["entry.b"] = self.entry_b
        return d

    def encode(self, features):
        """Per-vertex (n, 6) features -> (z, skip activations)."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        a1 = T.elu(cheb_conv(x, self.ops, self.enc1))
        x1 = apply_sampling(a1, self.hier.down[0])
        a2 = T.elu(cheb_conv(x1, self.hier.operators[0], self.enc2))
        x2 = apply_sampling(a2, self.hier.down[1])
        z = x2.reshape(1, -1) @ self.bottleneck_w + self.bottleneck_b
        return z.reshape(-1), (a1, a2)

    def decode(self, z, expr, skips=None):
        """(z, e) -> raw per-vertex head output (n, out_width)."""
        expr = expr if isinstance(expr, Tensor) else Tensor(expr)
        code = T.concat([z.reshape(-1), expr.reshape(-1)], axis=0)
        h = (code.reshape(1, -1) @ self.entry_w + self.entry_b)
        n2, w1 = self.hier.meshes[1].n_vertices, self.dec1.theta.data.shape[1]
        h = h.reshape(n2, w1)
        h = T.elu(cheb_conv(h, self.hier.operators[1], self.dec1))
        h = apply_sampling(h, self.hier.up[1])
        if self.use_skips:
            h = T.concat([h, skips[1]], axis=1)
        h = T.elu(cheb_conv(h, self.hier.operators[0], self.dec2))
        h = apply_sampling(h, self.hier.up[0])
        if self.use_skips:
            h = T.concat([h, skips[0]], axis=1)
        return cheb_conv(h, self.ops, self.head)


def mesh_features(mesh: TriMesh) -> np.ndarray:
    """The 6-wide per-vertex [position, normal] encoder input."""
    return np.concatenate([mesh.vertices, vertex_normals(mesh)], axis=1)


def decode_geometry(raw, max_offset: float, scale_max: float):
    """Raw (n, 10) head output -> (delta_mu, unit quaternions, scales)."""
    if not np.isfinite(raw.data).all():
        raise NumericsError("non-finite output in geometry head")
    delta_mu = T.tanh(raw[:, 0:3]) * max_offset
    ident = np.zeros((1, 4))
    ident[0, 0] = 1.0
    quat = normalize_rows(raw[:, 3:7] + Tensor(ident))
    scales = scale_activation(raw[:, 7:10], scale_max)
    return delta_mu, quat, scales


def decode_appearance(raw):
    """Raw (n, 4) head output -> (rgb colors, opacities), both in (0,1)."""
    if not np.isfinite(raw.data).all():
        raise NumericsError("non-finite output in appearance head")
    colors = T.sigmoid(raw[:, 0:3])
    opacities = T.sigmoid(raw[:, 3:4])
    return colors, opacities


class AnchorGenerator:
    """Bundles U_geo and U_app; one forward produces the anchor cloud."""

    GEO_WIDTH = 10

    def __init__(self, template: TriMesh, ops: GraphOperators,
                 hierarchy: SamplingHierarchy, expr_dim: int, k: int = 6,
                 widths: tuple[int, int] = (16, 32), k_sh: int = 0,
                 max_offset: float | None = None, scale_max: float | None = None,
                 use_skips: bool = False, seed: int = 0):
        if k_sh != 0:
            raise NotImplementedError("only RGB color generation (k_sh=0) is implemented")
        diag = template.bbox_diagonal()
        self.max_offset = 0.05 * diag if max_offset is None else max_offset
        self.scale_max = 0.10 * diag if scale_max is None else scale_max
        app_width = 3 * (k_sh + 1) ** 2 + 1
        self.geo = GraphUnet(ops, hierarchy, self.GEO_WIDTH, expr_dim, k=k,
                             widths=widths, use_skips=use_skips, seed=seed)
        self.app = GraphUnet(ops, hierarchy, app_width, expr_dim, k=k,
                             widths=widths, use_skips=use_skips, seed=seed + 1)

    def parameters(self) -> list[Tensor]:
        return self.geo.parameters() + self.app.parameters()

    def encode_pair(self, mesh: TriMesh):
        """Run both encoders; returns (z_geo, z_app, skips_geo, skips_app)."""
        feats = Tensor(mesh_features(mesh))
        z_geo, skips_g = self.geo.encode(feats)
        z_app, skips_a = self.app.encode(feats)
        return z_geo, z_app, skips_g, skips_a

    def decode_pair(self, mesh: TriMesh, z_geo, z_app, skips_g, skips_a, expr,
                    f_anc: Tensor | None = None) -> GaussianCloud:
        raw_geo = self.geo.decode(z_geo, expr, skips_g)
        raw_app = self.app.decode(z_app, expr, skips_a)
        delta_mu, quat, scales = decode_geometry(raw_geo, self.max_offset, self.scale_max)
        colors, opacities = decode_appearance(raw_app)
        centers = Tensor(mesh.vertices) + delta_mu
        return GaussianCloud(centers=centers, rotations=quat, scales=scales,
                             colors=colors, opacities=opacities, f_anc=f_anc)

    def generate_anchors(self, mesh: TriMesh, expr, f_anc: Tensor | None = None):
        """-> (anchor GaussianCloud, f_g bottleneck pair in R^16)."""
        z_geo, z_app, skips_g, skips_a = self.encode_pair(mesh)
        cloud = self.decode_pair(mesh, z_geo, z_app, skips_g, skips_a, expr, f_anc)
        f_g = T.concat([z_geo, z_app], axis=0)
        return cloud, f_g
