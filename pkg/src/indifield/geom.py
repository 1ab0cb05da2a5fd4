"""Core geometry containers and the k-nearest-neighbour index.

Points are stored as ``(N, 3)`` arrays rather than per-point objects.  Scan data
(point clouds) is kept in float32; reductions run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, InvalidArgument

NORMAL_TOL = 1e-6


def as_points(x, dtype=np.float64) -> np.ndarray:
    """Coerce ``x`` to an ``(N, 3)`` array, rejecting non-finite input."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgument(f"expected (N, 3) coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("coordinates must be finite")
    return arr


def normalize_rows(v: np.ndarray, eps: float = 0.0) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps) if eps else v / n


@dataclass
class OrientedPointCloud:
    """Surface samples with inward unit normals and per-point sensor indices.

    ``normals`` may be an empty ``(0, 3)`` array when the source had none; see
    :attr:`needs_normals`.
    """

    points: np.ndarray
    normals: np.ndarray = None
    sensor_ids: np.ndarray = None

    def __post_init__(self):
        self.points = as_points(self.points, np.float32)
        n = len(self.points)
        if self.normals is None:
            self.normals = np.zeros((0, 3), np.float32)
        self.normals = np.asarray(self.normals, np.float32).reshape(-1, 3)
        if self.sensor_ids is None:
            self.sensor_ids = np.zeros(n, np.int32)
        self.sensor_ids = np.asarray(self.sensor_ids, np.int32).reshape(-1)
        if len(self.sensor_ids) != n:
            raise InvalidArgument(f"{len(self.sensor_ids)} sensor ids for {n} points")
        if len(self.normals):
            if len(self.normals) != n:
                raise InvalidArgument(f"{len(self.normals)} normals for {n} points")
            lengths = np.linalg.norm(self.normals.astype(np.float64), axis=1)
            if not np.all(np.abs(lengths - 1.0) <= NORMAL_TOL):
                raise InvalidArgument("normals must have unit length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def needs_normals(self) -> bool:
        return len(self.normals) == 0 and len(self.points) > 0

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.points) == 0:
            raise EmptyInput("empty point cloud has no bounds")
        p = self.points.astype(np.float64)
        return p.min(axis=0), p.max(axis=0)

    def subset(self, index) -> "OrientedPointCloud":
        normals = self.normals[index] if len(self.normals) else None
        return OrientedPointCloud(self.points[index], normals, self.sensor_ids[index])

    @staticmethod
    def concatenate(clouds) -> "OrientedPointCloud":
        clouds = list(clouds)
        if not clouds:
            return OrientedPointCloud(np.zeros((0, 3)))
        with_normals = all(len(c.normals) == len(c) for c in clouds)
        return OrientedPointCloud(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.normals for c in clouds]) if with_normals else None,
            np.concatenate([c.sensor_ids for c in clouds]),
        )


@dataclass
class SensorSet:
    """Sensor positions, optionally with orientations as (w, x, y, z) quaternions."""

    positions: np.ndarray
    orientations: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, np.float64).reshape(-1, 3)
        if self.ids is None:
            self.ids = np.arange(len(self.positions), dtype=np.int64)
        self.ids = np.asarray(self.ids, np.int64).reshape(-1)
        if len(self.ids) != len(self.positions):
            raise InvalidArgument("sensor ids and positions differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidArgument("duplicate sensor ids")
        if self.orientations is not None:
            self.orientations = np.asarray(self.orientations, np.float64).reshape(-1, 4)
            if len(self.orientations) != len(self.positions):
                raise InvalidArgument("one orientation per sensor required")

    def __len__(self) -> int:
        return len(self.positions)

    def lookup(self, sensor_ids) -> np.ndarray:
        """Positions for each entry of ``sensor_ids``."""
        if len(self.positions) == 0:
            raise EmptyInput("sensor set is empty")
        sensor_ids = np.asarray(sensor_ids, np.int64)
        order = np.argsort(self.ids)
        sorted_ids = self.ids[order]
        pos = np.searchsorted(sorted_ids, sensor_ids)
        pos = np.clip(pos, 0, len(sorted_ids) - 1)
        if not np.all(sorted_ids[pos] == sensor_ids):
            missing = np.unique(sensor_ids[sorted_ids[pos] != sensor_ids])
            raise InvalidArgument(f"unknown sensor ids: {missing[:10].tolist()}")
        return self.positions[order[pos]]


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, np.int64).reshape(-1, 3)
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise InvalidArgument("triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise InvalidArgument("degenerate triangle with repeated vertex index")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self) -> np.ndarray:
        """``(T, 3, 3)`` array of triangle corner positions."""
        return self.vertices[self.triangles]

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return normalize_rows(n, 1e-300) if normalize else n

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += len(m.vertices)
        if not verts:
            return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


class KdTree:
    """Immutable k-NN index with deterministic tie breaking.

    Backed by :class:`scipy.spatial.cKDTree`; distances are recomputed in
    float64 and neighbours ordered by ``(distance, index)`` so equal distances
    resolve to the lower index.
    """

    def __init__(self, points, leafsize: int = 16):
        pts = np.asarray(points, np.float64)
        if pts.size == 0:
            raise EmptyInput("cannot build a k-d tree over zero points")
        pts = as_points(pts)
        self.points = pts
        self.points.flags.writeable = False
        self.leafsize = leafsize
        self._tree = cKDTree(pts, leafsize=leafsize, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def _dist(self, q: np.ndarray, idx: np.ndarray) -> np.ndarray:
        diff = self.points[idx] - q[:, None, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batched k-NN.

        Returns ``(indices, distances)`` of shape ``(Q, min(k, n))`` sorted by
        ascending distance, ties by index.
        """
        if k < 1:
            raise InvalidArgument(f"k must be >= 1, got {k}")
        q = as_points(queries)
        n = len(self.points)
        kk = min(k, n)
        m = min(kk + 1, n)
        _, cand = self._tree.query(q, k=m)
        cand = np.asarray(cand).reshape(len(q), m)
        dist = self._dist(q, cand)
        order = np.lexsort((cand, dist), axis=-1)
        cand = np.take_along_axis(cand, order, -1)
        dist = np.take_along_axis(dist, order, -1)
        idx, d = cand[:, :kk].copy(), dist[:, :kk].copy()
        if m > kk:
            # a tie straddling the cut may hide lower-indexed equidistant points
            suspect = dist[:, kk] <= dist[:, kk - 1] * (1 + 1e-12)
            for row in np.flatnonzero(suspect):
                r = dist[row, kk - 1] * (1 + 1e-9) + 1e-300
                ball = np.asarray(self._tree.query_ball_point(q[row], r), np.int64)
                bd = self._dist(q[row:row + 1], ball[None, :])[0]
                o = np.lexsort((ball, bd))[:kk]
                idx[row], d[row] = ball[o], bd[o]
        return idx, d

    def query(self, point, k: int) -> list[tuple[int, float]]:
        """Single-point k-NN as a list of ``(index, distance)`` pairs."""
        idx, d = self.knn(point, k)
        return [(int(i), float(v)) for i, v in zip(idx[0], d[0])]

    def nearest_distance(self, queries) -> np.ndarray:
        d, _ = self._tree.query(as_points(queries), k=1)
        return np.asarray(d, np.float64)


def build_kdtree(points, leafsize: int = 16) -> KdTree:
    return KdTree(points, leafsize)


def knn(tree: KdTree, query, k: int) -> list[tuple[int, float]]:
    return tree.query(query, k)


@dataclass
class VoxelGrid:
    """Dense payload on a regular lattice.

    Sample ``(i, j, k)`` sits at ``origin + (i, j, k) * spacing``; for occupancy
    grids the origin is the first voxel *center*.
    """

    data: np.ndarray
    origin: np.ndarray
    spacing: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, np.float64).reshape(3)
        self.spacing = float(self.spacing)
        if self.data.ndim != 3:
            raise InvalidArgument("voxel payload must be 3-D")
        if not self.spacing > 0:
            raise InvalidArgument("voxel spacing must be positive")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def index_to_world(self, ijk) -> np.ndarray:
        return self.origin + np.asarray(ijk, np.float64) * self.spacing

    def world_to_index(self, p) -> np.ndarray:
        """Continuous (fractional) lattice coordinates of world points."""
        return (np.asarray(p, np.float64) - self.origin) / self.spacing

    def coordinates(self) -> np.ndarray:
        """World coordinates of every sample, shape ``data.shape + (3,)``."""
        axes = [self.origin[a] + np.arange(n) * self.spacing for a, n in enumerate(self.data.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def cube_centers(cls, resolution: int, lo: float = -1.0, hi: float = 1.0, dtype=bool):
        """Empty grid of ``resolution**3`` voxels tiling ``[lo, hi]^3`` (center samples)."""
        h = (hi - lo) / resolution
        return cls(np.zeros((resolution,) * 3, dtype), np.full(3, lo + 0.5 * h), h)

    @classmethod
    def cube_corners(cls, resolution: int, lo: float = -1.0, hi: float = 1.0, dtype=np.float64):
        """Empty lattice of ``resolution**3`` samples including the cube corners."""
        if resolution < 2:
            raise InvalidArgument("corner lattice needs resolution >= 2")
        h = (hi - lo) / (resolution - 1)
        return cls(np.zeros((resolution,) * 3, dtype), np.full(3, lo), h)
