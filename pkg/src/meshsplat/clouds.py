"""Gaussian attribute containers, covariance assembly, neural-Gaussian spawning.

A cloud is columnar: centers (N,3), unit quaternions (N,4), positive scales
(N,3), RGB colors (N,3) in (0,1), opacities (N,1) in (0,1). Anchor clouds
additionally carry learnable per-anchor features used by the spawn MLPs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GaussianCloud:
    centers: Tensor
    rotations: Tensor
    scales: Tensor
    colors: Tensor
    opacities: Tensor
    f_anc: Tensor | None = None

    def __post_init__(self):
        for name in ("centers", "rotations", "scales", "colors", "opacities"):
            val = getattr(self, name)
            if not isinstance(val, Tensor):
                setattr(self, name, Tensor(val))
        if self.f_anc is not None and not isinstance(self.f_anc, Tensor):
            self.f_anc = Tensor(self.f_anc)

    @property
    def count(self) -> int:
        return self.centers.data.shape[0]

    def validate(self, scale_max: float | None = None) -> None:
        """Assert the container invariants; raises AssertionError on violation."""
        for name in ("centers", "rotations", "scales", "colors", "opacities"):
            arr = getattr(self, name).data
            assert np.isfinite(arr).all(), f"{name} contains non-finite values"
        qn = np.linalg.norm(self.rotations.data, axis=1)
        assert np.abs(qn - 1.0).max() <= 1e-6, "quaternions not unit length"
        assert (self.scales.data > 0).all(), "non-positive scale"
        if scale_max is not None:
            assert (self.scales.data <= scale_max + 1e-12).all(), "scale above cap"
        assert ((self.opacities.data > 0) & (self.opacities.data < 1)).all(), \
            "opacity outside (0,1)"

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name).data.copy()
               for name in ("centers", "rotations", "scales", "colors", "opacities")}
        return out


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Unit quaternions (N,4) wxyz -> rotation matrices (N,3,3), differentiable."""
    w, x, y, z = (q[:, i] for i in range(4))
    two = 2.0
    r = [
        1 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), 1 - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), 1 - two * (x * x + y * y),
    ]
    return T.stack(r, axis=1).reshape(-1, 3, 3)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    n = T.sqrt(T.tsum(x * x, axis=-1, keepdims=True) + eps)
    return x / n


def assemble_covariance(rotations: Tensor, scales: Tensor) -> Tensor:
    """Sigma = R diag(S) diag(S) R^T per Gaussian; symmetric PSD by construction."""
    r = quat_to_rotmat(rotations)
    s2 = scales * scales  # (N, 3)
    rs = r * s2.reshape(-1, 1, 3)  # scales columns of R
    return rs @ T.swapaxes(r, 1, 2)


def softcap(x: Tensor, cap: float) -> Tensor:
    """Smooth upper bound: identity below cap/2, saturating toward cap above.

    C1 at the knee; strictly monotonic, so the gradient never dies the way a
    hard clip would when an activation starts out beyond the cap.
    """
    half = 0.5 * cap
    over = T.exp((half - x) * (1.0 / half))  # exp(-(x-half)/half)
    soft = cap - half * over
    return T.where(x.data <= half, x, soft)


def scale_activation(raw: Tensor, scale_max: float, floor: float = 1e-6) -> Tensor:
    # raw is capped before exp so a runaway activation saturates smoothly
    # instead of overflowing to inf (whose zero-gradient product is NaN)
    return T.maximum(softcap(T.exp(T.minimum(raw, 30.0)), scale_max), floor)


def _mlp_params(rng, d_in, d_hidden, d_out, zero_out=False, out_scale=0.1):
    w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_hidden)),
                requires_grad=True)
    b1 = Tensor(np.zeros(d_hidden), requires_grad=True)
    if zero_out:
        w2 = Tensor(np.zeros((d_hidden, d_out)), requires_grad=True)
    else:
        w2 = Tensor(rng.normal(0.0, out_scale / np.sqrt(d_hidden), size=(d_hidden, d_out)),
                    requires_grad=True)
    b2 = Tensor(np.zeros(d_out), requires_grad=True)
    return [w1, b1, w2, b2]


def _mlp_apply(params, x: Tensor) -> Tensor:
    w1, b1, w2, b2 = params
    return T.elu(x @ w1 + b1) @ w2 + b2


class SpawnHeads:
    """Per-anchor offset bank plus the four attribute MLPs for neural Gaussians.

    Every anchor spawns ``k`` view-dependent Gaussians: centers are anchor +
    offset * anchor scale, remaining attributes come from MLPs fed with
    (anchor feature, view direction, expression code).
    """

    def __init__(self, n_anchors: int, expr_dim: int, k: int = 5,
                 feat_dim: int = 32, hidden: int = 64, seed: int = 0,
                 scale_max: float = 1.0, opacity_bias: float = -2.0,
                 init_scale: float | None = None):
        rng = np.random.default_rng(seed)
        self.k = k
        self.feat_dim = feat_dim
        self.scale_max = scale_max
        self.opacity_bias = opacity_bias
        self.f_anc = Tensor(rng.normal(0.0, 0.01, size=(n_anchors, feat_dim)),
                            requires_grad=True)
        self.offsets = Tensor(rng.normal(0.0, 0.1, size=(n_anchors, k, 3)),
                              requires_grad=True)
        d_in = feat_dim + 3 + expr_dim
        self.mlp_opacity = _mlp_params(rng, d_in, hidden, k, zero_out=True)
        self.mlp_color = _mlp_params(rng, d_in, hidden, 3 * k)
        self.mlp_rotation = _mlp_params(rng, d_in, hidden, 4 * k)
        self.mlp_scale = _mlp_params(rng, d_in, hidden, 3 * k)
        if init_scale is not None:
            # newly spawned Gaussians start small (raw 0 would mean exp(0)=1,
            # i.e. footprints at the cap that swamp the early renders)
            self.mlp_scale[3].data[:] = np.log(init_scale)

    def parameters(self) -> list[Tensor]:
        out = [self.f_anc, self.offsets]
        for mlp in (self.mlp_opacity, self.mlp_color, self.mlp_rotation, self.mlp_scale):
            out.extend(mlp)
        return out

    def param_dict(self) -> dict[str, Tensor]:
        names = {}
        names["f_anc"] = self.f_anc
        names["offsets"] = self.offsets
        for mlp_name, mlp in (("opacity", self.mlp_opacity), ("color", self.mlp_color),
                              ("rotation", self.mlp_rotation), ("scale", self.mlp_scale)):
            for pname, p in zip(("w1", "b1", "w2", "b2"), mlp):
                names[f"mlp_{mlp_name}.{pname}"] = p
        return names


def spawn_neural(anchors: GaussianCloud, camera, expr, heads: SpawnHeads) -> GaussianCloud:
    """Spawn k view-dependent neural Gaussians per anchor (anchors keep order)."""
    if anchors.f_anc is None:
        raise ValueError("anchor cloud has no f_anc features; cannot spawn")
    n = anchors.count
    k = heads.k
    expr = expr if isinstance(expr, Tensor) else Tensor(expr)

    cam_center = camera.center_world()  # (3,) Tensor
    d = anchors.centers - cam_center.reshape(1, 3)
    d_c = normalize_rows(d)

    e_rows = expr.reshape(1, -1) * Tensor(np.ones((n, 1))) if expr.data.ndim == 1 else expr
    x = T.concat([anchors.f_anc, d_c, e_rows], axis=1)

    mu = anchors.centers.reshape(n, 1, 3) + heads.offsets * anchors.scales.reshape(n, 1, 3)
    centers = mu.reshape(n * k, 3)

    raw_q = _mlp_apply(heads.mlp_rotation, x).reshape(n * k, 4)
    ident = np.zeros((1, 4))
    ident[0, 0] = 1.0
    rotations = normalize_rows(raw_q + Tensor(ident))

    raw_s = _mlp_apply(heads.mlp_scale, x).reshape(n * k, 3)
    scales = scale_activation(raw_s, heads.scale_max)

    colors = T.sigmoid(_mlp_apply(heads.mlp_color, x).reshape(n * k, 3))
    raw_a = _mlp_apply(heads.mlp_opacity, x).reshape(n * k, 1)
    opacities = T.sigmoid(raw_a + heads.opacity_bias)

    return GaussianCloud(centers=centers, rotations=rotations, scales=scales,
                         colors=colors, opacities=opacities)


def gather(anchors: GaussianCloud, neural: GaussianCloud | None) -> GaussianCloud:
    """Concatenate anchors first, then neural Gaussians."""
    if neural is None or neural.count == 0:
        return GaussianCloud(centers=anchors.centers, rotations=anchors.rotations,
                             scales=anchors.scales, colors=anchors.colors,
                             opacities=anchors.opacities)
    for name in ("centers", "rotations", "scales", "colors", "opacities"):
        a, b = getattr(anchors, name).data, getattr(neural, name).data
        if a.shape[1:] != b.shape[1:]:
            raise ValueError(f"attribute layout mismatch on {name}: {a.shape} vs {b.shape}")
    return GaussianCloud(
        centers=T.concat([anchors.centers, neural.centers], axis=0),
        rotations=T.concat([anchors.rotations, neural.rotations], axis=0),
        scales=T.concat([anchors.scales, neural.scales], axis=0),
        colors=T.concat([anchors.colors, neural.colors], axis=0),
        opacities=T.concat([anchors.opacities, neural.opacities], axis=0),
    )


# -- raw export -------------------------------------------------------------------

_GSPC_MAGIC = b"GSPC"
_GSPC_VERSION = 1
_ATTRS = (("centers", 3), ("rotations", 4), ("scales", 3), ("colors", 3), ("opacities", 1))


def save_gspc(cloud: GaussianCloud, path) -> int:
    """Write the raw columnar float32 cloud format; returns bytes written."""
    with open(path, "wb") as fh:
        fh.write(_GSPC_MAGIC)
        fh.write(struct.pack("<I", _GSPC_VERSION))
        fh.write(struct.pack("<Q", cloud.count))
        fh.write(struct.pack("<I", len(_ATTRS)))
        for name, width in _ATTRS:
            enc = name.encode()
            fh.write(struct.pack("<B", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", width))
        for name, width in _ATTRS:
            arr = getattr(cloud, name).data.astype("<f4")
            fh.write(arr.tobytes())
        return fh.tell()


def load_gspc(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        if fh.read(4) != _GSPC_MAGIC:
            raise ValueError("not a GSPC file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _GSPC_VERSION:
            raise ValueError(f"unsupported GSPC version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        (n_attrs,) = struct.unpack("<I", fh.read(4))
        attrs = []
        for _ in range(n_attrs):
            (ln,) = struct.unpack("<B", fh.read(1))
            name = fh.read(ln).decode()
            (width,) = struct.unpack("<I", fh.read(4))
            attrs.append((name, width))
        cols = {}
        for name, width in attrs:
            raw = fh.read(count * width * 4)
            cols[name] = np.frombuffer(raw, dtype="<f4").reshape(count, width).astype(np.float64)
    return GaussianCloud(**cols)


def gspc_size_bytes(count: int) -> int:
    """Size of one GSPC file with the standard attribute table."""
    header = 4 + 4 + 8 + 4 + sum(1 + len(n) + 4 for n, _ in _ATTRS)
    payload = count * sum(w for _, w in _ATTRS) * 4
    return header + payload
