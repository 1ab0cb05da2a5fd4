"""Analytic test geometry: icospheres, boxes and floor quads."""

from __future__ import annotations

import numpy as np

from .geom import TriangleMesh


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Outward-wound triangulated sphere with all vertices exactly on the sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        v = np.concatenate([v, mid])
    return TriangleMesh(v * radius + np.asarray(center, np.float64), f)


def box(lo, hi) -> TriangleMesh:
    """Axis-aligned box with outward winding (12 triangles)."""
    lo, hi = np.asarray(lo, np.float64), np.asarray(hi, np.float64)
    corners = np.array([[(hi if (i >> a) & 1 else lo)[a] for a in range(3)] for i in range(8)])
    quads = [
        (0, 2, 3, 1),  # z = lo
        (4, 5, 7, 6),  # z = hi
        (0, 1, 5, 4),  # y = lo
        (2, 6, 7, 3),  # y = hi
        (0, 4, 6, 2),  # x = lo
        (1, 3, 7, 5),  # x = hi
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [[a, b, c], [a, c, d]]
    return TriangleMesh(corners, np.array(tris))


def quad(center, half_extent: float, normal_axis: int = 2, facing: int = 1) -> TriangleMesh:
    """Square of side ``2 * half_extent`` perpendicular to ``normal_axis``.

    ``facing`` (+1/-1) selects which side the winding normal points to.
    """
    c = np.asarray(center, np.float64)
    u, w = [a for a in range(3) if a != normal_axis]
    verts = np.tile(c, (4, 1))
    for i, (su, sw) in enumerate([(-1, -1), (1, -1), (1, 1), (-1, 1)]):
        verts[i, u] += su * half_extent
        verts[i, w] += sw * half_extent
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    n = np.cross(verts[1] - verts[0], verts[2] - verts[0])
    if np.sign(n[normal_axis]) != np.sign(facing):
        tris = tris[:, ::-1]
    return TriangleMesh(verts, tris)


def sphere_indicator(points, radius: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Zero-centered indicator: +0.5 inside, -0.5 outside."""
    r = np.linalg.norm(np.asarray(points) - np.asarray(center), axis=-1)
    return np.where(r < radius, 0.5, -0.5)
