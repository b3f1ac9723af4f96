"""Synthetic animated-mesh dataset: the desk-scale stand-in for tracked video.

An icosphere template carries fixed random smooth blendshape bases; smooth
expression trajectories deform it per frame while a camera orbits. Ground
truth comes from an independent z-buffer triangle rasterizer with Lambertian
shading (no compositing code shared with the splat renderer), masks from its
coverage, and the tracked parameters can be corrupted with recorded noise to
exercise tracking refinement.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .images import load_png, save_png
from .meshes import TriMesh, icosphere, load_obj, save_obj, vertex_normals

EXPR_DIM = 8
LIGHT_DIR = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])


@dataclass
class FrameRecord:
    index: int
    t: float
    expr: np.ndarray
    quat: np.ndarray        # world->view rotation
    trans: np.ndarray
    mesh_path: Path
    image_path: Path
    mask_path: Path

    def load_mesh(self) -> TriMesh:
        return load_obj(self.mesh_path)

    def load_image(self) -> np.ndarray:
        return load_png(self.image_path)

    def load_mask(self) -> np.ndarray:
        return (load_png(self.mask_path) > 0.5).astype(np.float64)


@dataclass
class SyntheticSequence:
    root: Path
    template: TriMesh
    frames: list
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    expr_dim: int = EXPR_DIM


def smooth_blendshapes(mesh: TriMesh, n_bases: int, amplitude: float,
                       rng) -> np.ndarray:
    """(n_bases, n, 3) smooth random vertex fields, max displacement = amplitude."""
    n = mesh.n_vertices
    neighbors = [[] for _ in range(n)]
    for a, b in mesh.edges():
        neighbors[a].append(b)
        neighbors[b].append(a)
    idx = [np.array(nb) for nb in neighbors]
    bases = []
    for _ in range(n_bases):
        field = rng.normal(size=(n, 3))
        for _ in range(20):
            mean_nb = np.stack([field[i].mean(axis=0) for i in idx])
            field = 0.5 * field + 0.5 * mean_nb
        field *= amplitude / np.linalg.norm(field, axis=1).max()
        bases.append(field)
    return np.stack(bases)


def _rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0)) * 2
        q = np.zeros(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return q / np.linalg.norm(q)


def _quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _orbit_pose(t: float, orbit_radius: float, loops: float = 2.15):
    az = 2.0 * np.pi * loops * t
    el = 0.35 * np.sin(2.0 * np.pi * 0.9 * t + 0.7)
    eye = orbit_radius * np.array([np.cos(az) * np.cos(el),
                                   np.sin(az) * np.cos(el),
                                   np.sin(el)])
    fwd = -eye / np.linalg.norm(eye)
    upw = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, upw)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    tr = -r @ eye
    return r, tr


def vertex_colormap(vertices: np.ndarray) -> np.ndarray:
    """Fixed procedural per-vertex albedo in (0,1)."""
    p = vertices / max(np.abs(vertices).max(), 1e-12)
    return 0.5 + 0.5 * np.sin(np.pi * p * np.array([1.7, 2.3, 2.9]) + np.array([0.0, 1.3, 2.1]))


def render_ground_truth(mesh: TriMesh, quat, trans, fx, fy, cx, cy,
                        width, height, near=0.05, far=100.0):
    """Z-buffer barycentric rasterization with Lambertian shading.

    Returns (image (H,W,3) in [0,1] on white background, binary mask (H,W)).
    """
    r = _quat_to_rotmat(np.asarray(quat, dtype=np.float64))
    tr = np.asarray(trans, dtype=np.float64)
    v_view = mesh.vertices @ r.T + tr
    z = v_view[:, 2]
    albedo = vertex_colormap(mesh.vertices)
    normals = vertex_normals(mesh)
    lam = 0.3 + 0.7 * np.maximum(normals @ LIGHT_DIR, 0.0)
    vcol = np.clip(albedo * lam[:, None], 0.0, 1.0)

    img = np.ones((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    mask = np.zeros((height, width), dtype=bool)
    valid_z = z > near
    sx = fx * v_view[:, 0] / np.where(valid_z, z, 1.0) + cx
    sy = fy * v_view[:, 1] / np.where(valid_z, z, 1.0) + cy

    for f in mesh.faces:
        i0, i1, i2 = f
        if not (valid_z[i0] and valid_z[i1] and valid_z[i2]):
            continue
        xs = sx[f]
        ys = sy[f]
        x0 = max(int(np.floor(xs.min())), 0)
        x1 = min(int(np.ceil(xs.max())) + 1, width)
        y0 = max(int(np.floor(ys.min())), 0)
        y1 = min(int(np.ceil(ys.max())) + 1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        det = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(det) < 1e-12:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        w0 = ((xs[1] - xx) * (ys[2] - yy) - (xs[2] - xx) * (ys[1] - yy)) / det
        w1 = ((xs[2] - xx) * (ys[0] - yy) - (xs[0] - xx) * (ys[2] - yy)) / det
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # perspective-correct interpolation in 1/z
        iz = w0 / z[i0] + w1 / z[i1] + w2 / z[i2]
        zf = 1.0 / np.maximum(iz, 1e-12)
        closer = inside & (zf < zbuf[y0:y1, x0:x1]) & (zf < far)
        if not closer.any():
            continue
        col = (w0[..., None] * vcol[i0] / z[i0] + w1[..., None] * vcol[i1] / z[i1]
               + w2[..., None] * vcol[i2] / z[i2]) * zf[..., None]
        sub_img = img[y0:y1, x0:x1]
        sub_img[closer] = np.clip(col[closer], 0.0, 1.0)
        zbuf[y0:y1, x0:x1][closer] = zf[closer]
        mask[y0:y1, x0:x1] |= closer
    return img, mask.astype(np.float64)


def _attach_bump(mesh: TriMesh, radius: float) -> TriMesh:
    """Small protrusion merged into the surface for ground-truth rendering
    only; plays the role of geometry the tracked template cannot express."""
    bump = icosphere(1, radius=0.28 * radius)
    pole = mesh.vertices[np.argmax(mesh.vertices[:, 2])]
    verts = np.vstack([mesh.vertices, bump.vertices + pole])
    faces = np.vstack([mesh.faces, bump.faces + mesh.n_vertices])
    return TriMesh(verts, faces)


def generate_sequence(out_dir, seed: int = 0, frames: int = 32, resolution: int = 128,
                      blend_amplitude_frac: float = 0.1, orbit_loops: float = 2.15,
                      template: TriMesh | None = None,
                      untracked_geometry: bool = False) -> SyntheticSequence:
    """Write the full dataset to disk; byte-identical for identical arguments.

    With ``untracked_geometry`` the ground-truth images and masks include a
    protrusion that the tracked meshes lack, so covering it requires
    representation beyond the mesh surface.
    """
    if frames < 1:
        raise ValueError("need at least one frame")
    root = Path(out_dir)
    for sub in ("meshes", "images", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    mesh = icosphere(3) if template is None else template
    radius = np.linalg.norm(mesh.vertices, axis=1).mean()
    # cap per-basis amplitude so the summed deformation stays non-degenerate
    bases = smooth_blendshapes(mesh, EXPR_DIM, blend_amplitude_frac * radius / EXPR_DIM, rng)
    freqs = rng.uniform(0.5, 2.5, size=EXPR_DIM)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=EXPR_DIM)
    amps = rng.uniform(0.4, 1.0, size=EXPR_DIM)

    w = h = int(resolution)
    fx = fy = 1.1 * w
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    orbit_radius = 3.2 * radius
    near, far = 0.05 * orbit_radius, 3.0 * orbit_radius

    save_obj(mesh, root / "template.obj")
    records = []
    rows = []
    for i in range(frames):
        t = i / max(frames - 1, 1)
        e = amps * np.sin(2.0 * np.pi * freqs * t + phases)
        deformed = TriMesh(mesh.vertices + np.einsum("b,bnd->nd", e, bases), mesh.faces)
        r, tr = _orbit_pose(t, orbit_radius, loops=orbit_loops)
        q = _rotmat_to_quat(r)
        gt_mesh = _attach_bump(deformed, radius) if untracked_geometry else deformed
        img, mask = render_ground_truth(gt_mesh, q, tr, fx, fy, cx, cy, w, h,
                                        near=near, far=far)
        mesh_path = root / "meshes" / f"frame_{i:04d}.obj"
        image_path = root / "images" / f"frame_{i:04d}.png"
        mask_path = root / "masks" / f"frame_{i:04d}.png"
        save_obj(deformed, mesh_path)
        save_png(img, image_path)
        save_png(mask, mask_path)
        records.append(FrameRecord(index=i, t=t, expr=e, quat=q, trans=tr,
                                   mesh_path=mesh_path, image_path=image_path,
                                   mask_path=mask_path))
        rows.append([t, *e, *q, *tr])

    with open(root / "tracking.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"e{i}" for i in range(EXPR_DIM)]
                        + ["qw", "qx", "qy", "qz", "tx", "ty", "tz"])
        for row in rows:
            writer.writerow([f"{x:.17g}" for x in row])

    manifest = {
        "frames": frames,
        "resolution": [w, h],
        "intrinsics": {"fx": fx, "fy": fy, "cx": cx, "cy": cy},
        "near": near,
        "far": far,
        "expr_dim": EXPR_DIM,
        "seed": seed,
        "template": "template.obj",
        "meshes": "meshes/frame_%04d.obj",
        "images": "images/frame_%04d.png",
        "masks": "masks/frame_%04d.png",
        "tracking": "tracking.csv",
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return SyntheticSequence(root=root, template=mesh, frames=records,
                             fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
                             near=near, far=far)


def load_sequence(root) -> SyntheticSequence:
    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    template = load_obj(root / manifest["template"])
    w, h = manifest["resolution"]
    records = []
    with open(root / manifest["tracking"]) as fh:
        reader = csv.reader(fh)
        next(reader)
        for i, row in enumerate(reader):
            vals = np.array([float(x) for x in row])
            ne = manifest["expr_dim"]
            records.append(FrameRecord(
                index=i, t=vals[0], expr=vals[1:1 + ne],
                quat=vals[1 + ne:5 + ne], trans=vals[5 + ne:8 + ne],
                mesh_path=root / (manifest["meshes"] % i),
                image_path=root / (manifest["images"] % i),
                mask_path=root / (manifest["masks"] % i)))
    intr = manifest["intrinsics"]
    return SyntheticSequence(root=root, template=template, frames=records,
                             fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
                             width=w, height=h, near=manifest["near"], far=manifest["far"],
                             expr_dim=manifest["expr_dim"])


def corrupt_tracking(seq: SyntheticSequence, sigma_e: float = 0.05,
                     rot_jitter_deg: float = 1.0, trans_jitter: float = 0.0,
                     seed: int = 0) -> dict:
    """Perturb (e, camera) per frame; returns and stores the injected noise.

    The corrupted parameters overwrite the in-memory records (the pipeline
    trains against them); ground-truth noise goes to corruption.json for
    recovery tests.
    """
    rng = np.random.default_rng(seed)
    injected = []
    for rec in seq.frames:
        de = rng.normal(0.0, sigma_e, size=rec.expr.shape)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rot_jitter_deg) * rng.normal()
        dt = rng.normal(0.0, trans_jitter, size=3) if trans_jitter > 0 else np.zeros(3)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
        r_jit = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
        r_new = r_jit @ _quat_to_rotmat(rec.quat)
        rec.expr = rec.expr + de
        rec.quat = _rotmat_to_quat(r_new)
        rec.trans = rec.trans + dt
        injected.append({"frame": rec.index, "delta_e": de.tolist(),
                         "axis": axis.tolist(), "angle_rad": float(angle),
                         "delta_t": dt.tolist()})
    record = {"sigma_e": sigma_e, "rot_jitter_deg": rot_jitter_deg,
              "trans_jitter": trans_jitter, "seed": seed, "frames": injected}
    with open(seq.root / "corruption.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return record
