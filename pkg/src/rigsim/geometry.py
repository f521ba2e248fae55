"""Mesh containers, pinhole projection and barycentric embeddings.

Two embeddings couple the representations used by the pipeline: image
pixels are attached to surface triangles (for point tracking) and surface
vertices are attached to tetrahedra (so the simulated volume drives the
render mesh). Both are stored as an :class:`Embedding` and evaluated with
:func:`bary_eval`, which is linear in the host vertex positions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import InputError, NumericalError

__all__ = [
    "SurfaceMesh",
    "TetMesh",
    "Camera",
    "Embedding",
    "ProjectionError",
    "project",
    "project_backward",
    "embed_pixels",
    "embed_surface_in_tet",
    "bary_eval",
    "build_lattice_tet",
    "box_surface",
    "closest_point_on_triangles",
    "tet_barycentric",
    "read_obj",
    "write_obj",
    "read_face_colors",
    "write_face_colors",
    "read_tetmesh",
    "write_tetmesh",
]

AREA_TOL = 1e-12
Z_MIN = 1e-9


class ProjectionError(NumericalError):
    """Raised when a point cannot be projected (at or behind the camera plane)."""

    def __init__(self, index, depth):
        self.index = int(index)
        self.depth = float(depth)
        super().__init__(f"point {self.index} is behind the camera (camera-space z = {self.depth:.3g})")


@dataclass
class SurfaceMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) < 3:
            raise InputError("surface mesh needs at least 3 vertices")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InputError("face index out of range")
        if self.face_colors is None:
            self.face_colors = np.full((len(self.faces), 3), 0.7)
        self.face_colors = np.asarray(self.face_colors, dtype=np.float64).reshape(-1, 3)
        if len(self.face_colors) != len(self.faces):
            raise InputError("one color per face required")
        tri = self.vertices[self.faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        bad = np.flatnonzero(area <= AREA_TOL)
        if bad.size:
            raise InputError(f"degenerate face {bad[0]} (area {area[bad[0]]:.3g})")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


@dataclass
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray
    rest_volumes: np.ndarray = field(init=False)
    rest_Dm_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if len(self.tets) == 0:
            raise InputError("tet mesh has no elements")
        if self.tets.min() < 0 or self.tets.max() >= len(self.vertices):
            raise InputError("tet index out of range")
        Dm = self.shape_matrices(self.vertices)
        vol = np.linalg.det(Dm) / 6.0
        bad = np.flatnonzero(vol <= 0)
        if bad.size:
            raise InputError(f"tet {bad[0]} is not positively oriented (signed volume {vol[bad[0]]:.3g})")
        self.rest_volumes = vol
        self.rest_Dm_inv = np.linalg.inv(Dm)

    def shape_matrices(self, x):
        """Columns x1-x0, x2-x0, x3-x0 per tet, shape (n, 3, 3)."""
        p = x[self.tets]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    def centroids(self, x=None):
        x = self.vertices if x is None else x
        return x[self.tets].mean(axis=1)

    def boundary_faces(self):
        """Boundary triangles as (tet index, local vertex ids (3,)) with outward orientation."""
        local = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
        faces = self.tets[:, local].reshape(-1, 3)
        key = np.sort(faces, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        keep = np.flatnonzero(counts[inv] == 1)
        return keep // 4, local[keep % 4]


@dataclass
class Camera:
    """Pinhole camera. ``extrinsic`` maps world points to camera space, z forward."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(3, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise InputError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InputError("image size must be positive")
        R = self.extrinsic[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise InputError("extrinsic rotation is not orthonormal")

    @property
    def rotation(self):
        return self.extrinsic[:, :3]

    @property
    def translation(self):
        return self.extrinsic[:, 3]

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def pixel_rays(self, pixels):
        """World-space ray origin and (unnormalized) directions through pixel coordinates."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        d = np.stack([(pixels[:, 0] - self.cx) / self.fx, (pixels[:, 1] - self.cy) / self.fy,
                      np.ones(len(pixels))], axis=1)
        return self.center, d @ self.rotation

    def to_config(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "extrinsic": self.extrinsic.ravel().tolist()}

    @classmethod
    def from_config(cls, cfg):
        try:
            return cls(float(cfg["fx"]), float(cfg["fy"]), float(cfg["cx"]), float(cfg["cy"]),
                       int(cfg["width"]), int(cfg["height"]),
                       np.asarray(cfg["extrinsic"], dtype=np.float64).reshape(3, 4))
        except KeyError as exc:
            raise InputError(f"camera config missing key {exc}") from None

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height):
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(focal, focal, width / 2.0, height / 2.0, width, height,
                   np.hstack([R, (-R @ eye)[:, None]]))


@dataclass
class Embedding:
    host_index: np.ndarray
    bary: np.ndarray

    def __post_init__(self):
        self.host_index = np.asarray(self.host_index, dtype=np.int64).ravel()
        self.bary = np.asarray(self.bary, dtype=np.float64)
        if self.bary.ndim != 2 or len(self.bary) != len(self.host_index):
            raise InputError("barycentric weights must be (n, k) matching host_index")
        if self.bary.size and self.bary.min() < -1e-6:
            raise InputError("negative barycentric weight")
        if self.bary.size and np.abs(self.bary.sum(axis=1) - 1.0).max() > 1e-9:
            raise InputError("barycentric weights must sum to 1")

    def __len__(self):
        return len(self.host_index)

    def matrix(self, topology, n_host):
        """Sparse (n_points, n_host) interpolation matrix; ``bary_eval`` equals ``matrix @ host``."""
        cols = np.asarray(topology)[self.host_index]
        rows = np.repeat(np.arange(len(self)), self.bary.shape[1])
        return sp.csr_matrix((self.bary.ravel(), (rows, cols.ravel())), shape=(len(self), n_host))


def project(camera, points):
    """Pinhole projection of world points; returns ``(pixels (n, 2), depth (n,))``."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pc = camera.to_camera(np.atleast_2d(pts))
    z = pc[:, 2]
    bad = np.flatnonzero(~(z > Z_MIN))
    if bad.size:
        raise ProjectionError(bad[0], z[bad[0]])
    uv = np.stack([camera.fx * pc[:, 0] / z + camera.cx, camera.fy * pc[:, 1] / z + camera.cy], axis=1)
    if single:
        return uv[0], z[0]
    return uv, z


def project_backward(camera, points, grad_uv, grad_depth=None):
    """Gradient of a scalar w.r.t. world points given its gradient w.r.t. pixels and depths."""
    pc = camera.to_camera(np.atleast_2d(points))
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    gu, gv = grad_uv[:, 0], grad_uv[:, 1]
    gz = np.zeros_like(Z) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)
    g = np.stack([gu * camera.fx / Z, gv * camera.fy / Z,
                  gz - (gu * camera.fx * X + gv * camera.fy * Y) / Z**2], axis=1)
    return g @ camera.rotation


def bary_eval(embedding, host_vertices, host_topology):
    """Positions of embedded points as weight-combinations of their host simplex vertices."""
    topo = np.asarray(host_topology)
    if embedding.host_index.size and (embedding.host_index.min() < 0
                                      or embedding.host_index.max() >= len(topo)):
        raise InputError("embedding host index out of range")
    corners = np.asarray(host_vertices)[topo[embedding.host_index]]
    return np.einsum("nk,nkc->nc", embedding.bary, corners)


def tet_barycentric(points, tet, tet_ids=None):
    """Barycentric coordinates of each point w.r.t. tets ``tet_ids`` (all tets if None).

    Returns an array of shape (n_points, n_selected, 4).
    """
    ids = np.arange(tet.n_tets) if tet_ids is None else np.asarray(tet_ids)
    x0 = tet.vertices[tet.tets[ids, 0]]
    lam = np.einsum("tij,ptj->pti", tet.rest_Dm_inv[ids], points[:, None, :] - x0[None])
    return np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)


def closest_point_on_triangles(p, a, b, c):
    """Closest point on triangles (a, b, c) to points p, all arrays (n, 3).

    Returns the closest points and their barycentric coordinates (n, 3).
    Region tests follow the Voronoi-region classification for triangles.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 1 / 3)
        w = np.where(denom != 0, vc / denom, 1 / 3)
        bary = np.stack([1 - v - w, v, w], axis=1)

        # later assignments take precedence, matching the sequential region tests
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[m] = np.stack([np.zeros(m.sum()), 1 - t[m], t[m]], axis=1)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        bary[m] = np.stack([1 - t[m], np.zeros(m.sum()), t[m]], axis=1)
        m = (d6 >= 0) & (d5 <= d6)
        bary[m] = [0.0, 0.0, 1.0]
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        bary[m] = np.stack([1 - t[m], t[m], np.zeros(m.sum())], axis=1)
        m = (d3 >= 0) & (d4 <= d3)
        bary[m] = [0.0, 1.0, 0.0]
        m = (d1 <= 0) & (d2 <= 0)
        bary[m] = [1.0, 0.0, 0.0]
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return q, bary


def embed_surface_in_tet(surface, tet, chunk=256):
    """Attach every surface vertex to a tetrahedron.

    Vertices inside the tet mesh get the containing tet; vertices outside get
    the closest boundary tet with the closest-point barycentrics, clamped to
    be nonnegative and renormalized.
    """
    pts = surface.vertices if isinstance(surface, SurfaceMesh) else np.asarray(surface, dtype=np.float64)
    n = len(pts)
    host = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 4))
    for s in range(0, n, chunk):
        lam = tet_barycentric(pts[s:s + chunk], tet)
        score = lam.min(axis=2)
        best = score.argmax(axis=1)
        inside = score[np.arange(len(best)), best] >= -1e-6
        idx = np.arange(s, s + len(best))[inside]
        host[idx] = best[inside]
        bary[idx] = lam[inside, best[inside]]

    outside = np.flatnonzero(host < 0)
    if outside.size:
        ftet, flocal = tet.boundary_faces()
        corners = tet.vertices[tet.tets[ftet[:, None], flocal]]
        nf = len(ftet)
        step = max(1, 200_000 // nf)
        for s in range(0, outside.size, step):
            ids = outside[s:s + step]
            p = np.repeat(pts[ids], nf, axis=0)
            q, b3 = closest_point_on_triangles(p, np.tile(corners[:, 0], (len(ids), 1)),
                                               np.tile(corners[:, 1], (len(ids), 1)),
                                               np.tile(corners[:, 2], (len(ids), 1)))
            d2 = ((q - p) ** 2).sum(axis=1).reshape(len(ids), nf)
            best = d2.argmin(axis=1)
            sel = np.arange(len(ids)) * nf + best
            w = np.zeros((len(ids), 4))
            np.put_along_axis(w, flocal[best], b3[sel], axis=1)
            w = np.clip(w, 0.0, None)
            w /= w.sum(axis=1, keepdims=True)
            host[ids] = ftet[best]
            bary[ids] = w
    # snap tiny negative round-off inside tets
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    return Embedding(host, bary)


def embed_pixels(camera, pixels, mesh, pose_verts, chunk=512):
    """Unproject pixels onto the nearest front-facing triangle.

    Returns ``(embedding, kept, dropped)`` where ``kept``/``dropped`` index
    into ``pixels``. Raises :class:`InputError` if no pixel hits the mesh.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    out = (pixels[:, 0] < 0) | (pixels[:, 0] > camera.width) | (pixels[:, 1] < 0) | (pixels[:, 1] > camera.height)
    if out.any():
        raise InputError(f"pixel {np.flatnonzero(out)[0]} outside image bounds")
    verts = np.asarray(pose_verts, dtype=np.float64)
    tri = verts[mesh.faces]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    normal = np.cross(e1, e2)
    origin, dirs = camera.pixel_rays(pixels)

    n = len(pixels)
    face = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    eps = 1e-9
    for s in range(0, n, chunk):
        d = dirs[s:s + chunk]
        front = (d @ normal.T) < 0  # (p, f)
        pvec = np.cross(d[:, None, :], e2[None])
        det = np.einsum("fc,pfc->pf", e1, pvec)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tvec = origin - v0
            u = np.einsum("fc,pfc->pf", tvec, pvec) * inv
            qvec = np.cross(tvec, e1)
            v = (d @ qvec.T) * inv
            t = np.einsum("fc,fc->f", e2, qvec)[None, :] * inv
        hit = front & (np.abs(det) > 1e-15) & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > 0)
        t = np.where(hit, t, np.inf)
        best = t.argmin(axis=1)
        rows = np.arange(len(d))
        ok = np.isfinite(t[rows, best])
        idx = np.arange(s, s + len(d))[ok]
        bu = np.clip(u[rows, best][ok], 0.0, 1.0)
        bv = np.clip(v[rows, best][ok], 0.0, 1.0)
        b = np.stack([1.0 - bu - bv, bu, bv], axis=1)
        b = np.clip(b, 0.0, None)
        face[idx] = best[ok]
        bary[idx] = b / b.sum(axis=1, keepdims=True)
    kept = np.flatnonzero(face >= 0)
    dropped = np.flatnonzero(face < 0)
    if kept.size == 0:
        raise InputError("no foreground pixel hit the mesh")
    return Embedding(face[kept], bary[kept]), kept, dropped


_KUHN = [(0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7), (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7)]
_FIVE_EVEN = [(1, 2, 4, 7), (0, 1, 2, 4), (3, 1, 2, 7), (5, 1, 4, 7), (6, 2, 4, 7)]
_FIVE_ODD = [(0, 3, 5, 6), (1, 0, 3, 5), (2, 0, 3, 6), (4, 0, 5, 6), (7, 3, 5, 6)]


def build_lattice_tet(lo, hi, resolution, scheme="six"):
    """Tetrahedralize an axis-aligned box on a regular lattice.

    ``scheme="six"`` uses the conforming Kuhn split (6 tets per cell);
    ``scheme="five"`` uses 5 tets per cell with parity-alternating cells.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    if np.any(res < 1):
        raise InputError("lattice resolution must be >= 1 per axis")
    if np.any(hi - lo <= 0):
        raise InputError("lattice box has zero or negative extent")
    nx, ny, nz = res
    axes = [np.linspace(lo[d], hi[d], res[d] + 1) for d in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                corner = [vid(i + (b & 1), j + ((b >> 1) & 1), k + ((b >> 2) & 1)) for b in range(8)]
                if scheme == "six":
                    pattern = _KUHN
                elif scheme == "five":
                    pattern = _FIVE_EVEN if (i + j + k) % 2 == 0 else _FIVE_ODD
                else:
                    raise InputError(f"unknown lattice scheme {scheme!r}")
                tets.extend([corner[a] for a in t] for t in pattern)
    tets = np.asarray(tets, dtype=np.int64)
    p = verts[tets]
    vol = np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0])
    flip = vol < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return TetMesh(verts, tets)


def box_surface(lo, hi, divisions):
    """Closed, outward-oriented triangulated box surface with a regular grid per side."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    div = np.broadcast_to(np.asarray(divisions, dtype=np.int64), (3,))
    verts = []
    index = {}
    faces = []

    def vertex(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for side, coord in ((0, lo[axis]), (1, hi[axis])):
            us = np.linspace(lo[u_ax], hi[u_ax], div[u_ax] + 1)
            vs = np.linspace(lo[v_ax], hi[v_ax], div[v_ax] + 1)
            ids = np.empty((len(us), len(vs)), dtype=np.int64)
            for a, u in enumerate(us):
                for b, v in enumerate(vs):
                    p = np.empty(3)
                    p[axis], p[u_ax], p[v_ax] = coord, u, v
                    ids[a, b] = vertex(p)
            for a in range(len(us) - 1):
                for b in range(len(vs) - 1):
                    q = [ids[a, b], ids[a + 1, b], ids[a + 1, b + 1], ids[a, b + 1]]
                    faces.append([q[0], q[1], q[2]])
                    faces.append([q[0], q[2], q[3]])
            # orient outward
            n = len(us) - 1
            m = len(vs) - 1
            block = faces[len(faces) - 2 * n * m:]
            verts_arr = np.asarray(verts)
            f0 = verts_arr[block[0]]
            normal = np.cross(f0[1] - f0[0], f0[2] - f0[0])
            outward = normal[axis] > 0 if side == 1 else normal[axis] < 0
            if not outward:
                for f in block:
                    f[1], f[2] = f[2], f[1]
    return SurfaceMesh(np.asarray(verts), np.asarray(faces))


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(c) for c in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except (ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: bad record {line.strip()!r}") from None
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def write_obj(path, vertices, faces=None):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write("v %r %r %r\n" % tuple(float(c) for c in v[:3]))
        if faces is not None:
            for f in faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_face_colors(path, n_faces):
    colors = np.full((n_faces, 3), 0.7)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                colors[int(row["face"])] = [float(row["r"]), float(row["g"]), float(row["b"])]
            except (KeyError, ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: bad face color record") from None
    return colors


def write_face_colors(path, colors):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["face", "r", "g", "b"])
        for i, c in enumerate(colors):
            w.writerow([i, repr(float(c[0])), repr(float(c[1])), repr(float(c[2]))])


def read_tetmesh(path):
    """Read the ``tetmesh <nverts> <ntets>`` text format; returns (vertices, tets)."""
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != "tetmesh":
        raise InputError(f"{path}:1: expected header 'tetmesh <nverts> <ntets>'")
    nv, nt = int(head[1]), int(head[2])
    verts, tets = [], []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        try:
            if parts[0] == "v":
                verts.append([float(c) for c in parts[1:4]])
            elif parts[0] == "t":
                tets.append([int(c) for c in parts[1:5]])
            else:
                raise ValueError
        except (ValueError, IndexError):
            raise InputError(f"{path}:{lineno}: bad record {line.strip()!r}") from None
    if len(verts) != nv or len(tets) not in (0, nt):
        raise InputError(f"{path}: header counts ({nv}, {nt}) do not match records ({len(verts)}, {len(tets)})")
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(tets, dtype=np.int64).reshape(-1, 4)


def write_tetmesh(path, vertices, tets=None, n_tets=None):
    """Write vertices (and tets, when given) in the ``tetmesh`` text format."""
    nt = len(tets) if tets is not None else (n_tets or 0)
    with open(path, "w") as fh:
        fh.write(f"tetmesh {len(vertices)} {nt}\n")
        for v in vertices:
            fh.write("v %r %r %r\n" % tuple(float(c) for c in v[:3]))
        if tets is not None:
            for t in tets:
                fh.write(f"t {t[0]} {t[1]} {t[2]} {t[3]}\n")


def load_tet_mesh(path):
    return TetMesh(*read_tetmesh(path))


def load_surface_mesh(path, colors_path=None):
    v, f = read_obj(path)
    mesh = SurfaceMesh(v, f)
    if colors_path is not None and Path(colors_path).exists():
        mesh.face_colors = read_face_colors(colors_path, len(f))
    return mesh
