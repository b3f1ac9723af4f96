"""Differentiable CPU tile rasterizer for 3D Gaussian clouds.

Forward: perspective projection with EWA covariance flattening, global
depth sort, front-to-back alpha compositing in 16x16 tiles. Emits color,
alpha-weighted expected depth, and accumulated-opacity weight maps.

Backward: projection/covariance gradients flow through ordinary tape ops;
the per-pixel compositing is one custom tape node with an analytic
reverse sweep (suffix sums over the sorted contribution lists), emitting
gradients for centers, rotations, scales, colors, opacities, camera pose
and background.

``reference_render`` composites the full sorted list per pixel with no
tiling or binning; both renderers share the identical per-contribution
predicate (footprint box, alpha clamp, skip and stop thresholds) so they
agree to floating-point roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .clouds import GaussianCloud, assemble_covariance, quat_to_rotmat
from .tensor import Tensor

TILE = 16
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
STOP_T = 1e-4
LOWPASS = 0.3  # pixel-space covariance dilation
FOOTPRINT_SIGMA = 3.0


@dataclass
class Camera:
    """Pinhole camera; rotation (world->view) and translation live on the tape
    so pose-refinement gradients can reach them."""

    rotation: Tensor       # (3,3)
    translation: Tensor    # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not isinstance(self.rotation, Tensor):
            self.rotation = Tensor(self.rotation)
        if not isinstance(self.translation, Tensor):
            self.translation = Tensor(self.translation)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0 or self.far <= self.near:
            raise ValueError("require 0 < near < far")

    @classmethod
    def from_quaternion(cls, q, t, **kw) -> "Camera":
        r = _quat_to_rotmat_np(np.asarray(q, dtype=np.float64))
        return cls(rotation=Tensor(r), translation=Tensor(np.asarray(t, dtype=np.float64)), **kw)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **kw) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])  # world->view rows
        t = -r @ eye
        return cls(rotation=Tensor(r), translation=Tensor(t), **kw)

    def center_world(self) -> Tensor:
        return -(T.transpose(self.rotation) @ self.translation)

    def with_pose(self, rotation: Tensor, translation: Tensor) -> "Camera":
        return replace(self, rotation=rotation, translation=translation)

    def pose_arrays(self):
        return self.rotation.data.copy(), self.translation.data.copy()


def _quat_to_rotmat_np(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    conic: np.ndarray
    radius: float


@dataclass
class RenderOutput:
    color: Tensor    # (H, W, 3)
    depth: Tensor    # (H, W)
    weight: Tensor   # (H, W)
    background: Tensor
    n_rendered: int = 0


def project(gaussian: dict, camera: Camera):
    """Project one Gaussian given as {'center','cov','opacity','color'}.

    Returns a ProjectedGaussian, or None when culled (behind the near plane,
    beyond far, or footprint off-image). Numbers only; the differentiable
    path lives in ``render``.
    """
    r, t = camera.pose_arrays()
    center = np.asarray(gaussian["center"], dtype=np.float64)
    p = r @ center + t
    z = p[2]
    if z < camera.near or z > camera.far:
        return None
    mx = camera.fx * p[0] / z + camera.cx
    my = camera.fy * p[1] / z + camera.cy
    j = np.array([
        [camera.fx / z, 0.0, -camera.fx * p[0] / (z * z)],
        [0.0, camera.fy / z, -camera.fy * p[1] / (z * z)],
    ])
    cov_view = r @ np.asarray(gaussian["cov"]) @ r.T
    cov2d = j @ cov_view @ j.T + LOWPASS * np.eye(2)
    mid = 0.5 * (cov2d[0, 0] + cov2d[1, 1])
    lam = mid + np.sqrt(max(mid * mid - np.linalg.det(cov2d), 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(lam)
    if mx + radius < 0 or mx - radius > camera.width - 1 \
            or my + radius < 0 or my - radius > camera.height - 1:
        return None
    det = np.linalg.det(cov2d)
    conic = np.array([cov2d[1, 1], -cov2d[0, 1], cov2d[0, 0]]) / det
    return ProjectedGaussian(mean2d=np.array([mx, my]), cov2d=cov2d, depth=float(z),
                             opacity=float(gaussian["opacity"]),
                             color=np.asarray(gaussian["color"], dtype=np.float64),
                             conic=conic, radius=float(radius))


def _footprint_bounds(mean2d: np.ndarray, radius: np.ndarray, w: int, h: int):
    """Integer pixel bounds [x0, x1) x [y0, y1); shared by both renderers."""
    x0 = np.maximum(np.floor(mean2d[:, 0] - radius), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mean2d[:, 0] + radius) + 1, w).astype(np.int64)
    y0 = np.maximum(np.floor(mean2d[:, 1] - radius), 0).astype(np.int64)
    y1 = np.minimum(np.floor(mean2d[:, 1] + radius) + 1, h).astype(np.int64)
    return x0, x1, y0, y1


def _project_cloud(cloud: GaussianCloud, camera: Camera):
    """Differentiable projection of every Gaussian; returns tape tensors plus
    the numeric arrays needed for culling/sorting decisions."""
    r = camera.rotation
    p_view = cloud.centers @ T.transpose(r) + camera.translation  # (N,3)
    z_all = p_view[:, 2]

    keep_depth = np.flatnonzero((z_all.data >= camera.near) & (z_all.data <= camera.far))
    if keep_depth.size == 0:
        return None
    pv = T.take_rows(p_view, keep_depth)
    q = T.take_rows(cloud.rotations, keep_depth)
    s = T.take_rows(cloud.scales, keep_depth)
    cov = assemble_covariance(q, s)

    z = pv[:, 2]
    inv_z = 1.0 / z
    mx = pv[:, 0] * inv_z * camera.fx + camera.cx
    my = pv[:, 1] * inv_z * camera.fy + camera.cy
    mean2d = T.stack([mx, my], axis=1)

    # J W Sigma W^T J^T with J the local affine approximation of projection
    rb = r.reshape(1, 3, 3)
    cov_view = rb @ cov @ T.transpose(r).reshape(1, 3, 3)
    zero = z * 0.0
    inv_z2 = inv_z * inv_z
    jrow0 = T.stack([inv_z * camera.fx, zero, -pv[:, 0] * inv_z2 * camera.fx], axis=1)
    jrow1 = T.stack([zero, inv_z * camera.fy, -pv[:, 1] * inv_z2 * camera.fy], axis=1)
    j = T.stack([jrow0, jrow1], axis=1)  # (N,2,3)
    cov2d = j @ cov_view @ T.swapaxes(j, 1, 2)
    a = cov2d[:, 0, 0] + LOWPASS
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + LOWPASS

    det = a * c - b * b
    inv_det = 1.0 / det
    conic = T.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)

    mid = 0.5 * (a.data + c.data)
    lam = mid + np.sqrt(np.maximum(mid * mid - det.data, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(np.maximum(lam, 0.0))

    x0, x1, y0, y1 = _footprint_bounds(mean2d.data, radius, camera.width, camera.height)
    on_image = (x0 < x1) & (y0 < y1) & (det.data > 0)
    keep2 = np.flatnonzero(on_image)
    if keep2.size == 0:
        return None

    colors = T.take_rows(cloud.colors, keep_depth)
    alphas = T.take_rows(cloud.opacities, keep_depth).reshape(-1)

    # global ascending depth sort, ties broken by original index
    zk = z.data[keep2]
    order_local = np.lexsort((keep_depth[keep2], zk))
    sel = keep2[order_local]

    return {
        "mean2d": T.take_rows(mean2d, sel),
        "conic": T.take_rows(conic, sel),
        "z": T.take_rows(z, sel),
        "color": T.take_rows(colors, sel),
        "alpha": T.take_rows(alphas, sel),
        "radius": radius[sel],
    }


def _tile_bins(mean2d: np.ndarray, radius: np.ndarray, w: int, h: int):
    x0, x1, y0, y1 = _footprint_bounds(mean2d, radius, w, h)
    tx0, tx1 = x0 // TILE, (x1 - 1) // TILE
    ty0, ty1 = y0 // TILE, (y1 - 1) // TILE
    ntx = (w + TILE - 1) // TILE
    nty = (h + TILE - 1) // TILE
    bins = {}
    for ty in range(nty):
        row_mask = (ty0 <= ty) & (ty <= ty1)
        if not row_mask.any():
            continue
        for tx in range(ntx):
            ids = np.flatnonzero(row_mask & (tx0 <= tx) & (tx <= tx1))
            if ids.size:
                bins[(ty, tx)] = ids
    return bins, (x0, x1, y0, y1)


CHUNK = 64  # depth-sorted Gaussians composited per block before the stop check


def _exclusive_cumprod(factors: np.ndarray, t_entry: np.ndarray) -> np.ndarray:
    """t_entry * prod of factors before each row (inclusive scan, shifted)."""
    out = np.empty_like(factors)
    out[0] = t_entry
    if factors.shape[0] > 1:
        np.cumprod(factors[:-1], axis=0, out=out[1:])
        out[1:] *= t_entry
    return out


def _chunk_pass(sub, px, py, mean2d, conic, alphav, bounds, t_entry, stopped):
    """One depth block of the sequential compositing semantics.

    Skips contributions below the alpha threshold or outside the footprint
    box; a pixel stops permanently once its transmittance would drop below
    STOP_T. Returns what forward needs plus the arrays backward reuses.
    """
    x0, x1, y0, y1 = bounds
    dx = px[None, :] - mean2d[sub, 0][:, None]
    dy = py[None, :] - mean2d[sub, 1][:, None]
    inbox = ((px[None, :] >= x0[sub][:, None]) & (px[None, :] < x1[sub][:, None])
             & (py[None, :] >= y0[sub][:, None]) & (py[None, :] < y1[sub][:, None]))
    qf = (conic[sub, 0][:, None] * dx * dx
          + 2.0 * conic[sub, 1][:, None] * dx * dy
          + conic[sub, 2][:, None] * dy * dy)
    gexp = np.exp(-0.5 * np.maximum(qf, 0.0))
    a_prime = np.minimum(alphav[sub][:, None] * gexp, ALPHA_CLAMP)
    m1 = inbox & (a_prime >= ALPHA_SKIP) & ~stopped[None, :]

    factors = np.where(m1, 1.0 - a_prime, 1.0)
    t_excl = _exclusive_cumprod(factors, t_entry)
    violate = m1 & (t_excl * factors < STOP_T)
    slip = np.maximum.accumulate(violate, axis=0)
    include = m1 & ~slip

    a_inc = np.where(include, a_prime, 0.0)
    t_inc = _exclusive_cumprod(1.0 - a_inc, t_entry)
    wgt = a_inc * t_inc
    t_exit = t_inc[-1] * (1.0 - a_inc[-1])
    stopped_exit = stopped | slip[-1]
    return dx, dy, qf, gexp, a_prime, include, t_inc, wgt, t_exit, stopped_exit


def _tile_pixels(ty, tx, w, h):
    ys, ye = ty * TILE, min((ty + 1) * TILE, h)
    xs, xe = tx * TILE, min((tx + 1) * TILE, w)
    pyg, pxg = np.mgrid[ys:ye, xs:xe]
    return (ys, ye, xs, xe), pxg.ravel().astype(np.float64), pyg.ravel().astype(np.float64)


def _composite_op(mean2d_t, conic_t, z_t, color_t, alpha_t, bg_t, radius, w, h):
    """Custom tape node: packed (H, W, 5) output = [color, depth, weight].

    Forward composites each tile in depth blocks so fully saturated tiles
    stop early; the per-block (alpha, include, transmittance) records feed
    the analytic reverse sweep (suffix sums over included contributions).
    """
    mean2d, conic = mean2d_t.data, conic_t.data
    zv, colv, alphav, bg = z_t.data, color_t.data, alpha_t.data, bg_t.data
    bins, bounds = _tile_bins(mean2d, radius, w, h)

    packed = np.empty((h, w, 5))
    packed[:, :, 0:3] = bg[None, None, :]
    packed[:, :, 3] = 0.0
    packed[:, :, 4] = 0.0
    tfin_map = np.ones((h, w))
    draw_map = np.zeros((h, w))
    records = {}
    for key, ids in sorted(bins.items()):
        (ys, ye, xs, xe), px, py = _tile_pixels(*key, w, h)
        n_px = px.size
        color_acc = np.zeros((n_px, 3))
        draw_acc = np.zeros(n_px)
        t_run = np.ones(n_px)
        stopped = np.zeros(n_px, dtype=bool)
        chunks = []
        for start in range(0, ids.size, CHUNK):
            if stopped.all():
                break
            sub = ids[start:start + CHUNK]
            (_, _, _, _, a_prime, include, t_inc, wgt, t_run, stopped) = _chunk_pass(
                sub, px, py, mean2d, conic, alphav, bounds, t_run, stopped)
            color_acc += wgt.T @ colv[sub]
            draw_acc += wgt.T @ zv[sub]
            chunks.append((sub, a_prime, include, t_inc))
        records[key] = (chunks, t_run)
        cshape = (ye - ys, xe - xs)
        packed[ys:ye, xs:xe, 0:3] = (color_acc + t_run[:, None] * bg).reshape(cshape + (3,))
        draw_map[ys:ye, xs:xe] = draw_acc.reshape(cshape)
        tfin_map[ys:ye, xs:xe] = t_run.reshape(cshape)
    weight_map = 1.0 - tfin_map
    packed[:, :, 3] = draw_map / np.maximum(weight_map, 1e-6)
    packed[:, :, 4] = weight_map

    def vjp(g):
        d_color = g[:, :, 0:3]
        d_depth = g[:, :, 3]
        d_weight = g[:, :, 4]
        mclamp = np.maximum(weight_map, 1e-6)
        d_draw = d_depth / mclamp
        d_wtot = d_weight - d_depth * draw_map / (mclamp * mclamp) * (weight_map > 1e-6)
        # dL/dT_final: background enters color, weight = 1 - T_final
        gamma = d_color @ bg - d_wtot

        g_mean = np.zeros_like(mean2d)
        g_conic = np.zeros_like(conic)
        g_z = np.zeros_like(zv)
        g_col = np.zeros_like(colv)
        g_alpha = np.zeros_like(alphav)
        g_bg = (tfin_map[:, :, None] * d_color).sum(axis=(0, 1))

        for key, (chunks, t_final) in sorted(records.items()):
            if not chunks:
                continue
            (ys, ye, xs, xe), px, py = _tile_pixels(*key, w, h)
            dc = d_color[ys:ye, xs:xe].reshape(-1, 3)
            dd = d_draw[ys:ye, xs:xe].ravel()
            gam = gamma[ys:ye, xs:xe].ravel()
            t_gam = t_final * gam
            tail = np.zeros(px.size)
            for sub, a_prime, include, t_inc in reversed(chunks):
                dx = px[None, :] - mean2d[sub, 0][:, None]
                dy = py[None, :] - mean2d[sub, 1][:, None]
                qf = (conic[sub, 0][:, None] * dx * dx
                      + 2.0 * conic[sub, 1][:, None] * dx * dy
                      + conic[sub, 2][:, None] * dy * dy)
                gexp = np.exp(-0.5 * np.maximum(qf, 0.0))
                a_inc = np.where(include, a_prime, 0.0)
                wgt = a_inc * t_inc
                beta = colv[sub] @ dc.T + zv[sub][:, None] * dd[None, :]  # (B,P)
                bw = beta * wgt
                suffix = bw[::-1].cumsum(axis=0)[::-1] - bw + tail[None, :]
                da = include * (beta * t_inc - (suffix + t_gam[None, :])
                                / (1.0 - a_inc))
                # chain through the 0.99 clamp and alpha' = alpha * gexp
                da = da * (alphav[sub][:, None] * gexp < ALPHA_CLAMP)
                dgexp = da * alphav[sub][:, None]
                dq = -0.5 * gexp * dgexp * (qf > 0.0)
                # indices within one tile are unique: fancy += is safe
                g_alpha[sub] += (da * gexp).sum(axis=1)
                g_conic[sub, 0] += (dq * dx * dx).sum(axis=1)
                g_conic[sub, 1] += (dq * 2.0 * dx * dy).sum(axis=1)
                g_conic[sub, 2] += (dq * dy * dy).sum(axis=1)
                ddx = dq * 2.0 * (conic[sub, 0][:, None] * dx + conic[sub, 1][:, None] * dy)
                ddy = dq * 2.0 * (conic[sub, 1][:, None] * dx + conic[sub, 2][:, None] * dy)
                g_mean[sub, 0] -= ddx.sum(axis=1)
                g_mean[sub, 1] -= ddy.sum(axis=1)
                g_z[sub] += wgt @ dd
                g_col[sub] += wgt @ dc
                tail += bw.sum(axis=0)
        return g_mean, g_conic, g_z, g_col, g_alpha, g_bg

    return Tensor._make(packed, (mean2d_t, conic_t, z_t, color_t, alpha_t, bg_t),
                        vjp, "composite")



def render(cloud: GaussianCloud, camera: Camera, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Tile-rasterize a cloud. Differentiable w.r.t. every cloud attribute,
    the camera pose tensors, and the background color."""
    if camera.width <= 0 or camera.height <= 0:
        raise ValueError("zero-area image")
    bg = background if isinstance(background, Tensor) else Tensor(np.asarray(background, dtype=np.float64))
    proj = _project_cloud(cloud, camera)
    h, w = camera.height, camera.width
    if proj is None:
        packed = np.empty((h, w, 5))
        packed[:, :, 0:3] = bg.data[None, None, :]
        packed[:, :, 3] = 0.0
        packed[:, :, 4] = 0.0
        ones = np.ones((h, w, 1))
        base = Tensor._make(packed, (bg,),
                            lambda g: ((g[:, :, 0:3] * ones).sum(axis=(0, 1)),),
                            "composite_empty")
        return _unpack(base, bg, 0)
    packed = _composite_op(proj["mean2d"], proj["conic"], proj["z"],
                           proj["color"], proj["alpha"], bg, proj["radius"], w, h)
    return _unpack(packed, bg, proj["mean2d"].data.shape[0])


def _unpack(packed: Tensor, bg: Tensor, n_rendered: int) -> RenderOutput:
    color = packed[:, :, 0:3]
    depth = packed[:, :, 3]
    weight = packed[:, :, 4]
    return RenderOutput(color=color, depth=depth, weight=weight,
                        background=bg, n_rendered=n_rendered)


def reference_render(cloud: GaussianCloud, camera: Camera,
                     background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Brute-force oracle: per pixel, walk the full depth-sorted list.

    No tiling, no binning; numbers only (no tape). Shares the contribution
    predicate with ``render`` so the two agree to roundoff.
    """
    if camera.width <= 0 or camera.height <= 0:
        raise ValueError("zero-area image")
    bg = np.asarray(background.data if isinstance(background, Tensor) else background,
                    dtype=np.float64)
    h, w = camera.height, camera.width
    with T.no_grad():
        proj = _project_cloud(cloud, camera)
    color = np.tile(bg, (h, w, 1))
    draw = np.zeros((h, w))
    trans = np.ones((h, w))
    stopped = np.zeros((h, w), dtype=bool)
    if proj is not None:
        mean2d, conic = proj["mean2d"].data, proj["conic"].data
        zv, colv, alphav = proj["z"].data, proj["color"].data, proj["alpha"].data
        radius = proj["radius"]
        x0, x1, y0, y1 = _footprint_bounds(mean2d, radius, w, h)
        color[:] = 0.0
        for i in range(len(zv)):
            if x0[i] >= x1[i] or y0[i] >= y1[i]:
                continue
            sl = np.s_[y0[i]:y1[i], x0[i]:x1[i]]
            pyg, pxg = np.mgrid[y0[i]:y1[i], x0[i]:x1[i]]
            dx = pxg - mean2d[i, 0]
            dy = pyg - mean2d[i, 1]
            qf = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
            a_prime = np.minimum(alphav[i] * np.exp(-0.5 * np.maximum(qf, 0.0)), ALPHA_CLAMP)
            m1 = (a_prime >= ALPHA_SKIP) & ~stopped[sl]
            test_t = trans[sl] * (1.0 - a_prime)
            violate = m1 & (test_t < STOP_T)
            inc = m1 & ~violate
            wgt = np.where(inc, a_prime * trans[sl], 0.0)
            color[sl] += wgt[:, :, None] * colv[i]
            draw[sl] += wgt * zv[i]
            trans[sl] = np.where(inc, test_t, trans[sl])
            stopped[sl] |= violate
        color += trans[:, :, None] * bg
    weight = 1.0 - trans
    depth = draw / np.maximum(weight, 1e-6)
    return RenderOutput(color=Tensor(color), depth=Tensor(depth),
                        weight=Tensor(weight), background=Tensor(bg),
                        n_rendered=0 if proj is None else len(proj["z"].data))


def render_backward(out: RenderOutput, d_color=None, d_depth=None, d_weight=None,
                    params: list[Tensor] | None = None):
    """Seed the tape with output-map gradients and run backward.

    Returns the gradient map from ``backward``; pass ``params`` to also get
    zeros for unreached parameters.
    """
    terms = []
    if d_color is not None:
        terms.append(T.tsum(out.color * Tensor(d_color)))
    if d_depth is not None:
        terms.append(T.tsum(out.depth * Tensor(d_depth)))
    if d_weight is not None:
        terms.append(T.tsum(out.weight * Tensor(d_weight)))
    if not terms:
        raise ValueError("no output gradients given")
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return T.backward(loss, params=params)
