"""Isosurface extraction from a trained field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import InvalidArgument
from .geom import TriangleMesh, VoxelGrid
from .prep import NormalizationTransform
from .siren import SirenField


@dataclass
class ExtractionConfig:
    resolution: int = 128
    iso: float = 0.0
    lo: float = -1.0
    hi: float = 1.0
    dtype: str = "float32"
    slab: int = 8192

    def __post_init__(self):
        if self.resolution < 2:
            raise InvalidArgument("extraction resolution must be >= 2")
        if not self.hi > self.lo:
            raise InvalidArgument("empty extraction domain")


def sample_field_grid(field_: SirenField, config: ExtractionConfig | None = None) -> VoxelGrid:
    """Field values on the corner lattice of ``[lo, hi]^3`` (``resolution`` samples per axis)."""
    cfg = config or ExtractionConfig()
    grid = VoxelGrid.cube_corners(cfg.resolution, cfg.lo, cfg.hi, np.dtype(cfg.dtype))
    axis = cfg.lo + np.arange(cfg.resolution) * grid.spacing
    axis[-1] = cfg.hi
    n = cfg.resolution
    flat = grid.data.reshape(-1)
    # one x-slab at a time keeps peak memory at O(n^2)
    yy, zz = np.meshgrid(axis, axis, indexing="ij")
    yz = np.stack([yy.ravel(), zz.ravel()], 1)
    for i in range(n):
        pts = np.column_stack([np.full(n * n, axis[i]), yz])
        v, _, _ = field_.evaluate(pts, chunk=cfg.slab, dtype=cfg.dtype)
        flat[i * n * n:(i + 1) * n * n] = v
    grid.meta["iso"] = cfg.iso
    return grid


def weld(mesh: TriangleMesh, area_tol: float = 1e-12) -> TriangleMesh:
    """Merge identical vertices, drop repeated-index and zero-area triangles, drop unused vertices."""
    if mesh.is_empty:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    uniq, inv = np.unique(mesh.vertices, axis=0, return_inverse=True)
    tris = inv.reshape(-1)[mesh.triangles]
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[ok]
    c = uniq[tris]
    area = 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    tris = tris[area > area_tol]
    used, remap = np.unique(tris, return_inverse=True)
    return TriangleMesh(uniq[used], remap.reshape(-1, 3))


def marching_cubes(grid: VoxelGrid, iso: float = 0.0) -> TriangleMesh:
    """Classic marching cubes (Lorensen table) with linear edge interpolation.

    Triangles are wound so their normals point toward lower field values
    (outside, for fields that are high inside).  Vertices on shared cube edges
    are shared, so closed level sets give watertight meshes.
    """
    vol = np.asarray(grid.data, np.float64)
    if min(vol.shape) < 2:
        raise InvalidArgument("marching cubes needs at least 2 samples per axis")
    if not (vol.min() < iso < vol.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=iso, spacing=(grid.spacing,) * 3, method="lorensen",
        gradient_direction="ascent", allow_degenerate=False)
    verts = verts.astype(np.float64) + grid.origin
    return weld(TriangleMesh(verts, faces.astype(np.int64)))


def denormalize_mesh(mesh: TriangleMesh, transform: NormalizationTransform) -> TriangleMesh:
    return TriangleMesh(transform.inverse(mesh.vertices), mesh.triangles.copy())


def extract_mesh(field_: SirenField, config: ExtractionConfig | None = None,
                 transform: NormalizationTransform | None = None) -> TriangleMesh:
    cfg = config or ExtractionConfig()
    mesh = marching_cubes(sample_field_grid(field_, cfg), cfg.iso)
    return denormalize_mesh(mesh, transform) if transform is not None else mesh
