"""Two-stage training, evaluation, and checkpointing.

Stage one fits pseudo Gaussians to frame zero with plain splat optimization
and warms the graph U-nets up by regressing their anchors onto them; stage
two trains the full model (anchors, neural spawning, tracking refinement,
enhancer) end to end on the frame loss mix. Evaluation renders held-out
frames from a saved checkpoint and reports quality, timing, and the size
ratio against exporting raw per-frame clouds.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .clouds import GaussianCloud, SpawnHeads, gather, gspc_size_bytes, save_gspc, spawn_neural
from .graphnets import AnchorGenerator, NumericsError
from .losses import LossWeights, loss_coarse, loss_final, loss_weight, metrics, total_loss
from .meshes import TriMesh, build_hierarchy, build_operators
from .optim import Adam
from .render import Camera, render
from .synthetic import SyntheticSequence, load_sequence
from .tensor import Tensor
from .tracking import TrackingRefiner, apply_offsets
from .enhancer import Enhancer

BACKGROUND = (1.0, 1.0, 1.0)


@dataclass
class TrainConfig:
    data_dir: str = ""
    out_dir: str = "run"
    pseudo_iterations: int = 2000
    warmup_iterations: int = 10000
    iterations: int = 30000
    lr_unets: float = 1e-3
    lr_spawn: float = 1e-3
    lr_ggo: float = 1e-4
    lr_enhancer: float = 1e-3
    lr_pseudo: float = 5e-3
    seed: int = 0
    no_warmup: bool = False
    no_neural: bool = False
    no_ggo: bool = False
    no_enhancer: bool = False
    k: int = 5
    k_sh: int = 0
    cheb_order: int = 6
    widths: tuple = (16, 32)
    hierarchy_levels: int = 2
    hierarchy_factor: float = 4.0
    holdout_tail: int = 8
    e_bound: float = 0.5
    ggo_rotation_only: bool = False
    ggo_at_eval: bool = True
    log_every: int = 10
    snapshot_every: int = 500
    target_train_psnr: float = 0.0   # >0: stop stage two once reached
    target_test_psnr: float = 0.0
    target_check_every: int = 500
    pseudo_anchor_weight: float = 1.0
    max_seconds: float = 0.0         # >0: hard wall-clock budget for stage two

    def __post_init__(self):
        if self.iterations <= 0 or self.warmup_iterations <= 0 or self.pseudo_iterations <= 0:
            raise ValueError("iteration counts must be positive")
        self.widths = tuple(self.widths)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class AvatarModel:
    """All learnable state plus the fixed mesh machinery."""

    def __init__(self, template: TriMesh, expr_dim: int, cfg: TrainConfig):
        self.template = template
        self.cfg = cfg
        self.ops = build_operators(template, seed=cfg.seed)
        self.hierarchy = build_hierarchy(template, levels=cfg.hierarchy_levels,
                                         factor=cfg.hierarchy_factor, seed=cfg.seed)
        self.generator = AnchorGenerator(template, self.ops, self.hierarchy,
                                         expr_dim=expr_dim, k=cfg.cheb_order,
                                         widths=cfg.widths, k_sh=cfg.k_sh, seed=cfg.seed)
        edges = template.edges()
        edge_len = np.linalg.norm(template.vertices[edges[:, 0]]
                                  - template.vertices[edges[:, 1]], axis=1).mean()
        self.spawn = None if cfg.no_neural else SpawnHeads(
            template.n_vertices, expr_dim, k=cfg.k, seed=cfg.seed + 10,
            scale_max=self.generator.scale_max, init_scale=0.3 * edge_len)
        self.refiner = None if cfg.no_ggo else TrackingRefiner(
            expr_dim, e_bound=cfg.e_bound, rotation_only=cfg.ggo_rotation_only,
            seed=cfg.seed + 20)
        self.enhancer = None if cfg.no_enhancer else Enhancer(seed=cfg.seed + 30)

    def groups(self) -> dict[str, list[Tensor]]:
        g = {"unets": self.generator.parameters()}
        if self.spawn is not None:
            g["spawn"] = self.spawn.parameters()
        if self.refiner is not None:
            g["ggo"] = self.refiner.parameters()
        if self.enhancer is not None:
            g["enhancer"] = self.enhancer.parameters()
        return g

    def named_params(self) -> dict[str, Tensor]:
        named = {}
        for name, p in self.generator.geo.param_dict().items():
            named[f"u_geo/{name}"] = p
        for name, p in self.generator.app.param_dict().items():
            named[f"u_app/{name}"] = p
        if self.spawn is not None:
            for name, p in self.spawn.param_dict().items():
                named[f"spawn/{name}"] = p
        if self.refiner is not None:
            for name, p in self.refiner.param_dict().items():
                named[f"ggo/{name}"] = p
        if self.enhancer is not None:
            for name, p in self.enhancer.param_dict().items():
                named[f"enhancer/{name}"] = p
        return named


@dataclass
class FrameBatch:
    """One frame's data, cached in memory for the training loop."""

    index: int
    t: float
    expr: np.ndarray
    camera: Camera
    mesh: TriMesh
    image: np.ndarray
    mask: np.ndarray


def _load_frames(seq: SyntheticSequence, records) -> list[FrameBatch]:
    out = []
    for rec in records:
        cam = Camera.from_quaternion(rec.quat, rec.trans, fx=seq.fx, fy=seq.fy,
                                     cx=seq.cx, cy=seq.cy, width=seq.width,
                                     height=seq.height, near=seq.near, far=seq.far)
        out.append(FrameBatch(index=rec.index, t=rec.t, expr=rec.expr.copy(),
                              camera=cam, mesh=rec.load_mesh(),
                              image=rec.load_image(), mask=rec.load_mask()))
    return out


def split_frames(seq: SyntheticSequence, holdout_tail: int):
    recs = seq.frames
    if holdout_tail <= 0 or holdout_tail >= len(recs):
        return recs, []
    return recs[:-holdout_tail], recs[-holdout_tail:]


def forward_frame(model: AvatarModel, frame: FrameBatch, use_ggo: bool = True):
    """Full per-frame forward pass; returns (final, coarse, render output, aux)."""
    cfg = model.cfg
    camera, expr = frame.camera, frame.expr
    z_geo, z_app, sg, sa = model.generator.encode_pair(frame.mesh)
    offsets = None
    if model.refiner is not None and use_ggo:
        f_g = T.concat([z_geo, z_app], axis=0)
        f_t = model.refiner.temporal_features(frame.t)
        offsets = model.refiner.predict_offsets(f_g, f_t)
        camera, expr = apply_offsets(camera, expr, offsets)
    f_anc = model.spawn.f_anc if model.spawn is not None else None
    anchors = model.generator.decode_pair(frame.mesh, z_geo, z_app, sg, sa, expr,
                                          f_anc=f_anc)
    if model.spawn is not None:
        neural = spawn_neural(anchors, camera, expr, model.spawn)
        cloud = gather(anchors, neural)
    else:
        cloud = gather(anchors, None)
    out = render(cloud, camera, background=BACKGROUND)
    coarse = out.color
    if model.enhancer is not None:
        # the expected-depth division by max(weight, 1e-6) amplifies gradients
        # ~1e6x on silhouette fringes; the enhancer conditions on depth values
        # without sending gradients back into the rasterizer
        depth_in = Tensor(out.depth.data)
        final = model.enhancer.enhance(coarse, depth_in, camera.near, camera.far)
    else:
        final = coarse
    return final, coarse, out, offsets


def frame_losses(model: AvatarModel, frame: FrameBatch, weights: LossWeights,
                 use_ggo: bool = True):
    final, coarse, out, _ = forward_frame(model, frame, use_ggo=use_ggo)
    l_f = loss_final(final, frame.image, weights)
    l_c = loss_coarse(coarse, frame.image)
    l_w = loss_weight(out.weight, frame.mask)
    return total_loss(l_f, l_c, l_w, weights), l_f, l_c, l_w


# -- stage one: pseudo Gaussians and warm-up --------------------------------------


class PseudoParams:
    """Free per-Gaussian parameters for the static frame-zero fit."""

    def __init__(self, mesh: TriMesh, scale_max: float):
        n = mesh.n_vertices
        edges = mesh.edges()
        edge_len = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]],
                                  axis=1).mean()
        self.scale_max = scale_max
        self.centers = Tensor(mesh.vertices.copy(), requires_grad=True)
        self.rot_raw = Tensor(np.zeros((n, 4)), requires_grad=True)
        self.scale_raw = Tensor(np.full((n, 3), np.log(0.5 * edge_len)), requires_grad=True)
        self.color_raw = Tensor(np.zeros((n, 3)), requires_grad=True)
        self.opacity_raw = Tensor(np.zeros((n, 1)), requires_grad=True)

    def parameters(self):
        return [self.centers, self.rot_raw, self.scale_raw, self.color_raw,
                self.opacity_raw]

    def cloud(self) -> GaussianCloud:
        from .clouds import normalize_rows, scale_activation
        ident = np.zeros((1, 4))
        ident[0, 0] = 1.0
        return GaussianCloud(
            centers=self.centers,
            rotations=normalize_rows(self.rot_raw + Tensor(ident)),
            scales=scale_activation(self.scale_raw, self.scale_max),
            colors=T.sigmoid(self.color_raw),
            opacities=T.sigmoid(self.opacity_raw))


def fit_pseudo_gaussians(frames: list[FrameBatch] | FrameBatch, scale_max: float,
                         iterations: int = 2000, lr: float = 5e-3, lam: float = 0.2,
                         anchor_weight: float = 1.0, seed: int = 0,
                         log=None) -> GaussianCloud:
    """Static splat fit: one Gaussian per frame-zero vertex, no densification.

    The sequence is treated as a static scene: every training view supervises
    the same cloud, which keeps the fitted attributes consistent all the way
    around the subject (a single view would bake its own occlusions). A
    quadratic pull toward the vertices (scaled by mean edge length) keeps
    centers from scattering in depth, so the warm-up's index-paired
    regression target stays near the surface.
    """
    if isinstance(frames, FrameBatch):
        frames = [frames]
    frame0 = frames[0]
    params = PseudoParams(frame0.mesh, scale_max)
    opt = Adam(params.parameters(), lr=lr)
    edges = frame0.mesh.edges()
    edge_len = np.linalg.norm(frame0.mesh.vertices[edges[:, 0]]
                              - frame0.mesh.vertices[edges[:, 1]], axis=1).mean()
    verts = Tensor(frame0.mesh.vertices)
    rng = np.random.default_rng(seed)
    for it in range(iterations):
        frame = frames[rng.integers(len(frames))]
        out = render(params.cloud(), frame.camera, background=BACKGROUND)
        loss = (loss_final(out.color, frame.image,
                           LossWeights(lam=lam, lam_perc=0.0))
                + 0.1 * loss_weight(out.weight, frame.mask))
        if anchor_weight > 0:
            drift = (params.centers - verts) * (1.0 / edge_len)
            loss = loss + anchor_weight * T.tmean(drift * drift)
        if not np.isfinite(loss.data):
            raise NumericsError(f"pseudo fit diverged at iteration {it}")
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        if log is not None and it % 100 == 0:
            log(f"pseudo it {it}: loss {float(loss.data):.5f}")
    with T.no_grad():
        final = params.cloud()
        # canonical quaternion sign so the warm-up regression target is unique
        q = final.rotations.data.copy()
        q[q[:, 0] < 0] *= -1.0
        return GaussianCloud(centers=final.centers.data.copy(), rotations=q,
                             scales=final.scales.data.copy(),
                             colors=final.colors.data.copy(),
                             opacities=final.opacities.data.copy())


def warmup(model: AvatarModel, pseudo: GaussianCloud, frames: list[FrameBatch] | FrameBatch,
           iterations: int | None = None, seed: int = 1, log=None) -> list[float]:
    """Regress generated anchors onto the pseudo cloud (MSE in activated space).

    Every training frame conditions the U-nets during the regression (the
    decoder must see the whole expression range, not one point, or stage two
    starts out of distribution). Center targets are the pseudo cloud's
    per-vertex offsets transported onto each frame's mesh; the remaining
    attribute targets are shared.
    """
    if isinstance(frames, FrameBatch):
        frames = [frames]
    cfg = model.cfg
    iterations = cfg.warmup_iterations if iterations is None else iterations
    opt = Adam(model.generator.parameters(), lr=cfg.lr_unets)
    losses = []
    delta0 = pseudo.centers.data - frames[0].mesh.vertices
    targets = {name: Tensor(getattr(pseudo, name).data)
               for name in ("rotations", "scales", "colors", "opacities")}
    center_targets = [Tensor(f.mesh.vertices + delta0) for f in frames]
    rng = np.random.default_rng(seed)
    for it in range(iterations):
        idx = int(rng.integers(len(frames)))
        frame = frames[idx]
        anchors, _ = model.generator.generate_anchors(frame.mesh, frame.expr)
        diff = anchors.centers - center_targets[idx]
        loss = T.tmean(diff * diff)
        for name, target in targets.items():
            diff = getattr(anchors, name) - target
            loss = loss + T.tmean(diff * diff)
        if not np.isfinite(loss.data):
            raise NumericsError(f"warm-up diverged at iteration {it}")
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if log is not None and it % 500 == 0:
            log(f"warmup it {it}: mse {losses[-1]:.6f}")
    return losses


# -- stage two: full training ------------------------------------------------------


def train(cfg: TrainConfig, log=print) -> dict:
    """Run the full recipe; writes checkpoint + loss log, returns a summary."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seq = load_sequence(cfg.data_dir)
    train_recs, test_recs = split_frames(seq, cfg.holdout_tail)
    frames = _load_frames(seq, train_recs)
    model = AvatarModel(seq.template, seq.expr_dim, cfg)
    weights = LossWeights()
    rng = np.random.default_rng(cfg.seed)

    if not cfg.no_warmup:
        pseudo = fit_pseudo_gaussians(frames, model.generator.scale_max,
                                      iterations=cfg.pseudo_iterations,
                                      lr=cfg.lr_pseudo, lam=weights.lam,
                                      anchor_weight=cfg.pseudo_anchor_weight,
                                      seed=cfg.seed, log=log)
        warmup(model, pseudo, frames, seed=cfg.seed + 1, log=log)

    groups = model.groups()
    lrs = {"unets": cfg.lr_unets, "spawn": cfg.lr_spawn, "ggo": cfg.lr_ggo,
           "enhancer": cfg.lr_enhancer}
    opts = {name: Adam(params, lr=lrs[name]) for name, params in groups.items()}
    group_alive = {name: False for name in groups}

    loss_rows = []
    snapshot = None
    started = time.perf_counter()
    stop_reason = "iterations"
    it = 0
    for it in range(cfg.iterations):
        frame = frames[rng.integers(len(frames))]
        for opt in opts.values():
            opt.zero_grad()
        total, l_f, l_c, l_w = frame_losses(model, frame, weights)
        if not np.isfinite(total.data):
            if snapshot is not None:
                path = out_dir / "last_good.gava"
                ckpt_io.save(snapshot, path)
                raise NumericsError(
                    f"loss became non-finite at iteration {it}; last good state in {path}")
            raise NumericsError(f"loss became non-finite at iteration {it} (seed {cfg.seed})")
        grads = T.backward(total)
        for name, opt in opts.items():
            opt.step(grads)
            if not group_alive[name]:
                group_alive[name] = any(
                    p in grads and np.any(grads[p] != 0.0) for p in groups[name])
        loss_rows.append((it, float(l_f.data), float(l_c.data), float(l_w.data),
                          float(total.data)))
        if it == min(99, cfg.iterations - 1):
            dead = [name for name, alive in group_alive.items() if not alive]
            if dead:
                raise RuntimeError(f"parameter groups received no gradient: {dead}")
        if log is not None and it % cfg.log_every == 0:
            log(f"train it {it}: total {float(total.data):.5f} "
                f"(f {float(l_f.data):.5f} c {float(l_c.data):.5f} w {float(l_w.data):.5f})")
        if cfg.snapshot_every and (it + 1) % cfg.snapshot_every == 0:
            snapshot = build_checkpoint(model, seq)
        if cfg.target_train_psnr > 0 and (it + 1) % cfg.target_check_every == 0:
            tr_psnr = _quick_psnr(model, frames, limit=6)
            te_psnr = tr_psnr if not test_recs else _quick_psnr(
                model, _load_frames(seq, test_recs), limit=4,
                use_ggo=cfg.ggo_at_eval)
            if log is not None:
                log(f"  psnr check it {it + 1}: train {tr_psnr:.2f} test {te_psnr:.2f}")
            if tr_psnr >= cfg.target_train_psnr and te_psnr >= cfg.target_test_psnr:
                stop_reason = "target_reached"
                break
        if cfg.max_seconds > 0 and time.perf_counter() - started > cfg.max_seconds:
            stop_reason = "time_budget"
            break

    ckpt = build_checkpoint(model, seq)
    ckpt_path = out_dir / "model.gava"
    nbytes = ckpt_io.save(ckpt, ckpt_path)
    log_path = out_dir / "loss_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "l_f", "l_c", "l_w", "total"])
        for row in loss_rows:
            writer.writerow([repr(x) for x in row])
    return {"checkpoint": str(ckpt_path), "ckpt_bytes": nbytes,
            "loss_log": str(log_path), "iterations_run": it + 1,
            "stop_reason": stop_reason, "final_loss": loss_rows[-1][4],
            "loss_rows": loss_rows, "wall_seconds": time.perf_counter() - started}


def _quick_psnr(model: AvatarModel, frames: list[FrameBatch], limit: int = 6,
                use_ggo: bool = True) -> float:
    vals = []
    with T.no_grad():
        for frame in frames[:limit]:
            final, _, _, _ = forward_frame(model, frame, use_ggo=use_ggo)
            vals.append(metrics(final.data, frame.image)["psnr"])
    return float(np.mean(vals))


# -- checkpointing -----------------------------------------------------------------


def build_checkpoint(model: AvatarModel, seq: SyntheticSequence) -> ckpt_io.Checkpoint:
    cfg_echo = model.cfg.to_dict()
    cfg_echo["expr_dim"] = seq.expr_dim
    ckpt = ckpt_io.Checkpoint(
        config=cfg_echo,
        template_hash=ckpt_io.mesh_hash(model.template.vertices, model.template.faces))
    for name, p in model.named_params().items():
        ckpt.add(name, p.data, "<f4")
    ckpt.add("template/vertices", model.template.vertices, "<f8")
    ckpt.add("template/faces", model.template.faces, "<i8")
    for lvl in range(model.hierarchy.levels):
        for tag, mat in (("down", model.hierarchy.down[lvl]),
                         ("up", model.hierarchy.up[lvl])):
            coo = mat.tocoo()
            ckpt.add(f"hier/{tag}{lvl}.row", coo.row.astype(np.int64), "<i8")
            ckpt.add(f"hier/{tag}{lvl}.col", coo.col.astype(np.int64), "<i8")
            ckpt.add(f"hier/{tag}{lvl}.val", coo.data, "<f8")
            ckpt.add(f"hier/{tag}{lvl}.shape", np.array(mat.shape, dtype=np.int64), "<i8")
    return ckpt


def model_from_checkpoint(ckpt: ckpt_io.Checkpoint) -> tuple[AvatarModel, TrainConfig]:
    cfg_echo = dict(ckpt.config)
    expr_dim = cfg_echo.pop("expr_dim")
    cfg = TrainConfig.from_dict(cfg_echo)
    template = TriMesh(ckpt.sections["template/vertices"].astype(np.float64),
                       ckpt.sections["template/faces"].astype(np.int64))
    if ckpt_io.mesh_hash(template.vertices, template.faces) != ckpt.template_hash:
        raise ValueError("checkpoint template hash mismatch")
    model = AvatarModel(template, expr_dim, cfg)
    named = model.named_params()
    for name, p in named.items():
        if name not in ckpt.sections:
            raise ValueError(f"checkpoint is missing section {name!r}")
        arr = ckpt.sections[name].astype(p.data.dtype)
        if arr.shape != p.data.shape:
            raise ValueError(f"section {name!r} has shape {arr.shape}, "
                             f"expected {p.data.shape}")
        p.data[:] = arr
    return model, cfg


# -- evaluation --------------------------------------------------------------------


def evaluate(ckpt_path, data_dir, out_dir, frames: str = "test", log=print) -> dict:
    """Render held-out frames from a checkpoint; write metrics CSV + JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = ckpt_io.load(ckpt_path)
    model, cfg = model_from_checkpoint(ckpt)
    seq = load_sequence(data_dir)
    if ckpt_io.mesh_hash(seq.template.vertices, seq.template.faces) != ckpt.template_hash:
        raise ValueError("dataset template does not match the checkpoint")
    train_recs, test_recs = split_frames(seq, cfg.holdout_tail)
    recs = {"test": test_recs, "train": train_recs, "all": seq.frames}[frames]
    if not recs:
        raise ValueError(f"no {frames} frames to evaluate")
    batches = _load_frames(seq, recs)

    rows = []
    seconds = 0.0
    raw_dir = out_dir / "raw_clouds"
    raw_dir.mkdir(exist_ok=True)
    raw_bytes = 0
    with T.no_grad():
        for frame in batches:
            t0 = time.perf_counter()
            final, coarse, rout, _ = forward_frame(model, frame,
                                                   use_ggo=cfg.ggo_at_eval)
            seconds += time.perf_counter() - t0
            m = metrics(final.data, frame.image)
            rows.append({"frame_id": frame.index, **m})
        # raw export of the full per-frame cloud sequence for the size ratio
        for frame in _load_frames(seq, seq.frames):
            cloud = _frame_cloud(model, frame, use_ggo=cfg.ggo_at_eval)
            raw_bytes += save_gspc(cloud, raw_dir / f"frame_{frame.index:04d}.gspc")

    mean = {key: float(np.mean([r[key] for r in rows]))
            for key in ("l2", "psnr", "ssim", "proxy")}
    summary = {**mean,
               "sec_per_frame": seconds / len(batches),
               "ckpt_bytes": Path(ckpt_path).stat().st_size,
               "raw_cloud_bytes": raw_bytes,
               "frames": len(batches)}
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "l2", "psnr", "ssim", "proxy"])
        for r in rows:
            writer.writerow([r["frame_id"], repr(r["l2"]), repr(r["psnr"]),
                             repr(r["ssim"]), repr(r["proxy"])])
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if log is not None:
        log(f"evaluate: psnr {mean['psnr']:.2f} ssim {mean['ssim']:.4f} "
            f"({summary['sec_per_frame']:.3f} s/frame)")
    return summary


def _frame_cloud(model: AvatarModel, frame: FrameBatch, use_ggo: bool) -> GaussianCloud:
    camera, expr = frame.camera, frame.expr
    z_geo, z_app, sg, sa = model.generator.encode_pair(frame.mesh)
    if model.refiner is not None and use_ggo:
        f_g = T.concat([z_geo, z_app], axis=0)
        offsets = model.refiner.predict_offsets(f_g, model.refiner.temporal_features(frame.t))
        camera, expr = apply_offsets(camera, expr, offsets)
    f_anc = model.spawn.f_anc if model.spawn is not None else None
    anchors = model.generator.decode_pair(frame.mesh, z_geo, z_app, sg, sa, expr, f_anc=f_anc)
    if model.spawn is not None:
        return gather(anchors, spawn_neural(anchors, camera, expr, model.spawn))
    return gather(anchors, None)
