"""Triangle-mesh graph machinery.

Adjacency, the non-normalized Laplacian L = D - A with its Chebyshev scaling,
area-weighted vertex normals, and the two-level decimation hierarchy
(quadric-error edge collapse down, barycentric interpolation back up) used by
the graph U-nets.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as T


@dataclass
class TriMesh:
    """Vertices (n, 3) and triangular faces (m, 3) of int vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        n = len(self.vertices)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise ValueError("face index out of range")
            if np.any((self.faces[:, 0] == self.faces[:, 1])
                      | (self.faces[:, 1] == self.faces[:, 2])
                      | (self.faces[:, 0] == self.faces[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def bbox_diagonal(self) -> float:
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    def edges(self) -> np.ndarray:
        """Unique undirected edges (e, 2), sorted pairs."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


@dataclass
class GraphOperators:
    """Adjacency, degree, Laplacian and its Chebyshev rescaling for one mesh."""

    adjacency: sp.csr_matrix
    degree: np.ndarray
    laplacian: sp.csr_matrix
    lambda_max: float
    scaled_laplacian: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class SamplingHierarchy:
    """Per-level downsample selectors, barycentric upsamplers, coarse operators."""

    down: list = field(default_factory=list)       # Q_d, one-hot row selectors
    up: list = field(default_factory=list)         # Q_u, barycentric rows
    meshes: list = field(default_factory=list)     # coarse TriMesh per level
    operators: list = field(default_factory=list)  # GraphOperators per level
    kept: list = field(default_factory=list)       # fine-level indices kept per level

    @property
    def levels(self) -> int:
        return len(self.down)


def connected_components(mesh: TriMesh) -> list[np.ndarray]:
    a = _adjacency(mesh)
    ncomp, labels = sp.csgraph.connected_components(a, directed=False)
    return [np.flatnonzero(labels == i) for i in range(ncomp)]


def _adjacency(mesh: TriMesh) -> sp.csr_matrix:
    e = mesh.edges()
    n = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # collapse duplicate entries to binary
    return a


def _power_iteration_lambda_max(lap: sp.csr_matrix, iters: int = 100,
                                tol: float = 1e-9, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=lap.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = lap @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_lam = float(v @ (lap @ v))
        if lam != 0.0 and abs(new_lam - lam) / abs(lam) < tol:
            lam = new_lam
            break
        lam = new_lam
    return lam


def build_operators(mesh: TriMesh, seed: int = 0) -> GraphOperators:
    """Adjacency from face edges, L = D - A, and L~ = 2L/lambda_max - I.

    lambda_max comes from power iteration and is padded by 1% so the scaled
    spectrum stays inside [-1, 1]. Raises on disconnected meshes.
    """
    comps = connected_components(mesh)
    if len(comps) > 1:
        sizes = ", ".join(str(len(c)) for c in comps)
        raise ValueError(f"mesh has {len(comps)} connected components (sizes {sizes})")
    a = _adjacency(mesh)
    deg = np.asarray(a.sum(axis=1)).ravel()
    lap = (sp.diags(deg) - a).tocsr()
    lam = _power_iteration_lambda_max(lap, seed=seed) * 1.01
    n = mesh.n_vertices
    scaled = (lap * (2.0 / lam) - sp.identity(n)).tocsr()
    return GraphOperators(adjacency=a, degree=deg, laplacian=lap,
                          lambda_max=lam, scaled_laplacian=scaled)


def face_normals_areas(vertices: np.ndarray, faces: np.ndarray):
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    cross = np.cross(v1 - v0, v2 - v0)
    norms = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norms
    unit = np.zeros_like(cross)
    ok = norms > 1e-300
    unit[ok] = cross[ok] / norms[ok, None]
    return unit, areas


def vertex_normals(mesh: TriMesh, warn=None) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length.

    Zero-area faces contribute nothing; a vertex whose every incident face is
    degenerate gets (0, 0, 1) and triggers ``warn`` if provided.
    """
    unit, areas = face_normals_areas(mesh.vertices, mesh.faces)
    weighted = unit * areas[:, None]
    acc = np.zeros_like(mesh.vertices)
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], weighted)
    lens = np.linalg.norm(acc, axis=1)
    bad = lens < 1e-300
    if bad.any():
        if warn is not None:
            warn(f"{int(bad.sum())} vertices with only degenerate faces; normals set to +z")
        acc[bad] = (0.0, 0.0, 1.0)
        lens[bad] = 1.0
    return acc / lens[:, None]


# -- quadric-error decimation hierarchy ----------------------------------------


def _vertex_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Sum of incident face plane quadrics (n, 4, 4)."""
    unit, areas = face_normals_areas(vertices, faces)
    d = -np.einsum("ij,ij->i", unit, vertices[faces[:, 0]])
    planes = np.concatenate([unit, d[:, None]], axis=1)  # (m, 4)
    fq = planes[:, :, None] * planes[:, None, :] * areas[:, None, None]
    q = np.zeros((len(vertices), 4, 4))
    for c in range(3):
        np.add.at(q, faces[:, c], fq)
    return q


def _decimate(mesh: TriMesh, target: int, seed: int = 0):
    """Quadric-error edge collapse to ~target vertices.

    Each collapse folds one endpoint into the other (kept vertices stay a
    subset of the originals, which keeps Q_d one-hot). Returns the kept
    vertex indices and the coarse faces expressed in kept-vertex numbering.
    """
    v = mesh.vertices
    n = len(v)
    quadrics = _vertex_quadrics(v, mesh.faces)
    parent = np.arange(n)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    neighbors = [set() for _ in range(n)]
    for a, b in mesh.edges():
        neighbors[a].add(int(b))
        neighbors[b].add(int(a))

    def cost(a, b):
        # collapse a -> b: error of keeping b under both quadrics
        q = quadrics[a] + quadrics[b]
        h = np.append(v[b], 1.0)
        return float(h @ q @ h)

    heap = []
    counter = 0
    for a in range(n):
        for b in neighbors[a]:
            if a < b:
                heapq.heappush(heap, (min(cost(a, b), cost(b, a)), counter, a, b))
                counter += 1

    alive = np.ones(n, dtype=bool)
    n_alive = n
    while n_alive > target and heap:
        _, _, a, b = heapq.heappop(heap)
        ra, rb = find(a), find(b)
        if ra == rb or not (alive[ra] and alive[rb]) or rb not in neighbors[ra]:
            continue
        # link condition: collapsing must not pinch the surface
        common = (neighbors[ra] & neighbors[rb]) - {ra, rb}
        if len(common) != 2:
            continue
        # fold the endpoint with higher keep-error into the other
        if cost(ra, rb) <= cost(rb, ra):
            dead, keep = ra, rb
        else:
            dead, keep = rb, ra
        parent[dead] = keep
        alive[dead] = False
        quadrics[keep] = quadrics[keep] + quadrics[dead]
        for nb in list(neighbors[dead]):
            neighbors[nb].discard(dead)
            if nb != keep:
                neighbors[nb].add(keep)
                neighbors[keep].add(nb)
        neighbors[keep].discard(dead)
        neighbors[dead] = set()
        n_alive -= 1
        for nb in neighbors[keep]:
            heapq.heappush(heap, (min(cost(keep, nb), cost(nb, keep)), counter, keep, nb))
            counter += 1

    kept = np.flatnonzero(alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    roots = np.array([find(i) for i in range(n)])
    coarse_faces = remap[roots[mesh.faces]]
    good = ((coarse_faces[:, 0] != coarse_faces[:, 1])
            & (coarse_faces[:, 1] != coarse_faces[:, 2])
            & (coarse_faces[:, 0] != coarse_faces[:, 2]))
    coarse_faces = coarse_faces[good]
    # drop duplicated triangles (ignoring winding-preserving rotations)
    key = np.sort(coarse_faces, axis=1)
    _, uniq = np.unique(key, axis=0, return_index=True)
    coarse_faces = coarse_faces[np.sort(uniq)]
    return kept, coarse_faces


def _closest_point_barycentric(p: np.ndarray, tri: np.ndarray):
    """Barycentric coords of the closest point on a triangle; all >= 0."""
    a, b, c = tri
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.array([1.0, 0.0, 0.0])
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.array([0.0, 1.0, 0.0])
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        return np.array([1.0 - t, t, 0.0])
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.array([0.0, 0.0, 1.0])
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        return np.array([1.0 - t, 0.0, t])
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.array([0.0, 1.0 - t, t])
    denom = va + vb + vc
    v_ = vb / denom
    w_ = vc / denom
    return np.array([1.0 - v_ - w_, v_, w_])


def _barycentric_upsample(fine_vertices: np.ndarray, coarse: TriMesh) -> sp.csr_matrix:
    """Each fine vertex -> barycentric weights on its nearest coarse triangle."""
    tri_pts = coarse.vertices[coarse.faces]  # (m, 3, 3)
    centroids = tri_pts.mean(axis=1)
    rows, cols, vals = [], [], []
    for i, p in enumerate(fine_vertices):
        # limit the exact test to the nearest triangles by centroid
        d2 = np.einsum("ij,ij->i", centroids - p, centroids - p)
        cand = np.argsort(d2)[:24]
        best, best_d, best_w = -1, np.inf, None
        for fidx in cand:
            w = _closest_point_barycentric(p, tri_pts[fidx])
            q = w @ tri_pts[fidx]
            dd = float((q - p) @ (q - p))
            if dd < best_d:
                best, best_d, best_w = fidx, dd, w
        f = coarse.faces[best]
        for j in range(3):
            if best_w[j] > 0.0:
                rows.append(i)
                cols.append(int(f[j]))
                vals.append(float(best_w[j]))
    m = sp.csr_matrix((vals, (rows, cols)),
                      shape=(len(fine_vertices), coarse.n_vertices))
    # defensive renormalization; closest-point weights already sum to 1
    scale = 1.0 / np.asarray(m.sum(axis=1)).ravel()
    return sp.diags(scale) @ m


def build_hierarchy(mesh: TriMesh, levels: int = 2, factor: float = 4.0,
                    seed: int = 0) -> SamplingHierarchy:
    """Decimate ``levels`` times by ~``factor``; build Q_d / Q_u per level."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if factor <= 1.0:
        raise ValueError("factor must be > 1")
    hier = SamplingHierarchy()
    current = mesh
    for _ in range(levels):
        target = int(round(current.n_vertices / factor))
        if target < 16:
            raise ValueError(
                f"decimation target {target} below 16 vertices; lower levels/factor")
        kept, coarse_faces = _decimate(current, target, seed=seed)
        coarse = TriMesh(current.vertices[kept], coarse_faces)
        n_fine, n_coarse = current.n_vertices, coarse.n_vertices
        q_d = sp.csr_matrix((np.ones(n_coarse), (np.arange(n_coarse), kept)),
                            shape=(n_coarse, n_fine))
        q_u = _barycentric_upsample(current.vertices, coarse)
        hier.down.append(q_d)
        hier.up.append(q_u)
        hier.meshes.append(coarse)
        hier.operators.append(build_operators(coarse, seed=seed))
        hier.kept.append(kept)
        current = coarse
    return hier


def apply_sampling(features, matrix: sp.csr_matrix):
    """Sparse resampling of per-vertex features, differentiable via the tape."""
    feats = features if isinstance(features, T.Tensor) else T.Tensor(features)
    if feats.data.shape[0] != matrix.shape[1]:
        raise ValueError(
            f"feature rows {feats.data.shape[0]} do not match operator width {matrix.shape[1]}")
    return T.sparse_matmul(matrix, feats)


# -- mesh synthesis and OBJ I/O ---------------------------------------------------


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron; subdivision 3 gives 642 vertices."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    for _ in range(subdivisions):
        midpoint = {}
        new_faces = []
        verts_list = list(verts)

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = verts_list[a] + verts_list[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        for f in faces:
            a, b, c = int(f[0]), int(f[1]), int(f[2])
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return TriMesh(verts * radius, faces)


def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangular faces are supported")
                faces.append(idx)
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))
