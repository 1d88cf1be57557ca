"""Surface extraction, surface sampling and the F-Score at a distance threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _skimage_mc

from .errors import EmptySurfaceError
from .voxels import VoxelGrid

N_SURFACE_POINTS = 8192


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) in voxel-index coordinates
    triangles: np.ndarray  # (T, 3) int

    @property
    def empty(self):
        return len(self.triangles) == 0

    def areas(self):
        v = self.vertices
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)

    def euler_characteristic(self):
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(t))
        return n_verts - n_edges + len(t)


@dataclass
class SurfaceSample:
    points: np.ndarray  # (n_s, 3)
    triangle_index: np.ndarray  # source triangle per point
    barycentric: np.ndarray  # (n_s, 3)
    mesh: TriangleMesh


def marching_cubes(g, iso=0.3):
    """Triangle mesh of the ``iso`` level set, closed by one layer of empty padding.

    Vertices are linearly interpolated along cube edges (classic 256-case
    table) and expressed in the unpadded voxel-index frame.
    """
    vals = g.values if isinstance(g, VoxelGrid) else np.asarray(g, dtype=np.float64)
    padded = np.pad(vals, 1)
    if not (padded.min() < iso < padded.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = _skimage_mc(padded, level=iso, method="lorensen", allow_degenerate=False)
    mesh = TriangleMesh(verts.astype(np.float64) - 1.0, faces.astype(np.int64))
    keep = mesh.areas() > 1e-12
    if not keep.all():
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[keep])
    return mesh


def sample_surface(mesh, n_s=N_SURFACE_POINTS, seed=0):
    """Area-weighted uniform samples from the mesh surface."""
    if mesh.empty:
        raise EmptySurfaceError("cannot sample an empty surface")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n_s, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n_s))
    r2 = rng.random(n_s)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    corners = mesh.vertices[mesh.triangles[tri]]  # (n_s, 3, 3)
    points = np.einsum("nk,nkd->nd", bary, corners)
    return SurfaceSample(points, tri, bary, mesh)


def normalize_to(points, reference_vertices):
    """Translate/scale so the reference bounding box starts at 0 with longest side 1."""
    lo = reference_vertices.min(axis=0)
    extent = float((reference_vertices.max(axis=0) - lo).max())
    return (np.asarray(points) - lo) / (extent if extent > 0 else 1.0)


def _points(s):
    pts = s.points if isinstance(s, SurfaceSample) else np.asarray(s, dtype=np.float64)
    if len(pts) == 0:
        raise EmptySurfaceError("point cloud is empty")
    return pts


def precision_recall(pred, gt, d):
    """Nearest-neighbour distances both ways, thresholded strictly at ``d``."""
    r, g = _points(pred), _points(gt)
    d_rg, _ = cKDTree(g).query(r, k=1)
    d_gr, _ = cKDTree(r).query(g, k=1)
    return float(np.mean(d_rg < d)), float(np.mean(d_gr < d))


def f_score(pred, gt, d=0.01):
    """``(precision, recall, F)``; F is 0 when precision and recall are both 0."""
    if d <= 0:
        raise ValueError("distance threshold must be positive")
    p, r = precision_recall(pred, gt, d)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def surface_f_scores(pred_grid, gt_grid, ds=(0.01,), iso=0.3, n_s=N_SURFACE_POINTS, seed=0):
    """F-Scores between two voxel grids in the GT-bounding-box frame.

    Returns a list of ``(d, P, R, F)``; an empty predicted surface scores 0.
    """
    gt_mesh = marching_cubes(gt_grid, iso)
    if gt_mesh.empty:
        raise EmptySurfaceError("ground-truth grid has no surface")
    pred_mesh = marching_cubes(pred_grid, iso)
    if pred_mesh.empty:
        return [(d, 0.0, 0.0, 0.0) for d in ds]
    g = normalize_to(sample_surface(gt_mesh, n_s, seed).points, gt_mesh.vertices)
    r = normalize_to(sample_surface(pred_mesh, n_s, seed + 1).points, gt_mesh.vertices)
    return [(d, *f_score(r, g, d)) for d in ds]


def write_obj(path, mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
