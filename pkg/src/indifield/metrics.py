"""Mesh comparison metrics: Chamfer distance, occupancy IoU and distance-field error.

All meshes are expected in normalized coordinates (the ``[-1, 1]`` cube).
Chamfer is the symmetric mean of Euclidean (not squared) nearest-neighbor
distances; the distance-field error is the per-voxel RMS, in voxel units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyInput, EmptyMesh, InvalidArgument, UndefinedDistanceField
from .geom import KdTree, TriangleMesh, VoxelGrid, as_points

DEFAULT_SAMPLES = 262_144
DEFAULT_RESOLUTION = 128
_MAX_PAIRS = 1 << 21


@dataclass
class MetricReport:
    chamfer: float
    iou: float
    l2: float
    n_samples: int
    resolution: int
    seed: int
    pred_occupied: int = 0
    gt_occupied: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def sample_surface(mesh: TriangleMesh, n: int = DEFAULT_SAMPLES, seed=0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise EmptyMesh("cannot sample an empty mesh")
    if n < 1:
        raise InvalidArgument("sample count must be >= 1")
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise EmptyMesh("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners()[tri]
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return w0[:, None] * c[:, 0] + w1[:, None] * c[:, 1] + w2[:, None] * c[:, 2]


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbor distance ``(mean_a d(a,B) + mean_b d(b,A)) / 2``."""
    a = as_points(a)
    b = as_points(b)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("chamfer distance needs two non-empty point sets")
    ab = KdTree(b).nearest_distance(a).mean()
    ba = KdTree(a).nearest_distance(b).mean()
    # fixed summation order keeps chamfer(a, b) == chamfer(b, a) bitwise
    lo, hi = sorted((float(ab), float(ba)))
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------- voxelization


def _enumerate_boxes(start: np.ndarray, count: np.ndarray, max_elems: int = _MAX_PAIRS):
    """Yield ``(owner, offsets)`` for every integer cell in per-row boxes.

    ``start`` and ``count`` are ``(T, d)``; ``offsets`` holds absolute cell
    indices ``(m, d)`` and ``owner`` the row each cell came from.
    """
    count = np.maximum(count, 0)
    sizes = np.prod(count, axis=1)
    keep = np.flatnonzero(sizes > 0)
    if len(keep) == 0:
        return
    csum = np.cumsum(sizes[keep])
    lo = 0
    while lo < len(keep):
        base = csum[lo - 1] if lo else 0
        hi = int(np.searchsorted(csum, base + max_elems, side="right"))
        hi = max(hi, lo + 1)
        rows = keep[lo:hi]
        n_t = sizes[rows]
        owner = np.repeat(rows, n_t)
        first = np.repeat(np.cumsum(n_t) - n_t, n_t)
        local = np.arange(int(n_t.sum())) - first
        cnt = count[owner]
        cells = np.empty((len(owner), count.shape[1]), np.int64)
        for d in range(count.shape[1] - 1, -1, -1):
            cells[:, d] = local % cnt[:, d]
            local = local // cnt[:, d]
        yield owner, cells + start[owner]
        lo = hi


def _is_top_left(du: np.ndarray, dw: np.ndarray) -> np.ndarray:
    # for a shared edge traversed in opposite directions exactly one side claims it
    return (dw > 0) | ((dw == 0) & (du < 0))


def _parity_axis(corners: np.ndarray, axis: int, res: int, lo: float, h: float) -> np.ndarray:
    """Crossing parity of rays cast along +axis through every voxel center."""
    u_ax, w_ax = [a for a in range(3) if a != axis]
    P = corners[:, :, [u_ax, w_ax]]
    X = corners[:, :, axis]
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok = area != 0
    P, X, area = P[ok], X[ok], area[ok]
    # orient every projected triangle counter-clockwise
    flip = area < 0
    P[flip] = P[flip][:, [0, 2, 1]]
    X[flip] = X[flip][:, [0, 2, 1]]
    area = np.abs(area)

    pmin = P.min(axis=1)
    pmax = P.max(axis=1)
    first = np.ceil((pmin - lo) / h - 0.5).astype(np.int64)
    last = np.floor((pmax - lo) / h - 0.5).astype(np.int64)
    first = np.clip(first, 0, res)
    last = np.clip(last, -1, res - 1)
    counts = np.zeros((res, res, res + 1), np.int32)
    for owner, cell in _enumerate_boxes(first, last - first + 1):
        q = lo + (cell + 0.5) * h
        tri = P[owner]
        inside = np.ones(len(owner), bool)
        bary = np.empty((len(owner), 3))
        for i in range(3):
            a = tri[:, i]
            b = tri[:, (i + 1) % 3]
            # canonical endpoint order so both triangles sharing an edge compute
            # bitwise-negated edge functions
            swap = (a[:, 0] > b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] > b[:, 1]))
            s = np.where(swap[:, None], b, a)
            t = np.where(swap[:, None], a, b)
            d = t - s
            e = d[:, 0] * (q[:, 1] - s[:, 1]) - d[:, 1] * (q[:, 0] - s[:, 0])
            e = np.where(swap, -e, e)
            du = b[:, 0] - a[:, 0]
            dw = b[:, 1] - a[:, 1]
            inside &= (e > 0) | ((e == 0) & _is_top_left(du, dw))
            # the edge opposite vertex (i + 2) % 3
            bary[:, (i + 2) % 3] = e
        if not inside.any():
            continue
        sel = np.flatnonzero(inside)
        o = owner[sel]
        lam = bary[sel] / area[o][:, None]
        x = (lam * X[o]).sum(axis=1)
        k = np.floor((x - lo) / h - 0.5).astype(np.int64) + 1
        k = np.clip(k, 0, res)
        np.add.at(counts, (cell[sel, 0], cell[sel, 1], k), 1)
    par = (np.cumsum(counts[:, :, :res], axis=2) & 1).astype(bool)
    # par is indexed (u, w, axis); move axes back to (x, y, z)
    order = [u_ax, w_ax, axis]
    return np.transpose(par, np.argsort(order))


def _point_triangle_distance(p, a, b, c) -> np.ndarray:
    """Euclidean distance from points to triangles (row-wise)."""
    n = np.cross(b - a, c - a)
    nn = np.einsum("ij,ij->i", n, n)
    best = np.full(len(p), np.inf)
    good = nn > 0
    if good.any():
        g = np.flatnonzero(good)
        ng = n[g]
        t = np.einsum("ij,ij->i", p[g] - a[g], ng) / nn[g]
        proj = p[g] - t[:, None] * ng
        inside = np.ones(len(g), bool)
        for u, v in ((a, b), (b, c), (c, a)):
            side = np.einsum("ij,ij->i", np.cross(v[g] - u[g], proj - u[g]), ng)
            inside &= side >= 0
        best[g[inside]] = np.abs(t[inside]) * np.sqrt(nn[g[inside]])
    for u, v in ((a, b), (b, c), (c, a)):
        d = v - u
        dd = np.einsum("ij,ij->i", d, d)
        s = np.einsum("ij,ij->i", p - u, d) / np.where(dd > 0, dd, 1.0)
        s = np.clip(s, 0.0, 1.0)
        r = p - (u + s[:, None] * d)
        best = np.minimum(best, np.sqrt(np.einsum("ij,ij->i", r, r)))
    return best


def surface_voxels(mesh: TriangleMesh, resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Voxels whose center lies within half a voxel of the surface."""
    h = (hi - lo) / resolution
    occ = np.zeros((resolution,) * 3, bool)
    if mesh.is_empty:
        return occ
    c = mesh.corners()
    r = 0.5 * h
    first = np.ceil((c.min(axis=1) - r - lo) / h - 0.5).astype(np.int64)
    last = np.floor((c.max(axis=1) + r - lo) / h - 0.5).astype(np.int64)
    first = np.clip(first, 0, resolution)
    last = np.clip(last, -1, resolution - 1)
    for owner, cell in _enumerate_boxes(first, last - first + 1):
        q = lo + (cell + 0.5) * h
        t = c[owner]
        near = _point_triangle_distance(q, t[:, 0], t[:, 1], t[:, 2]) <= r
        cc = cell[near]
        occ[cc[:, 0], cc[:, 1], cc[:, 2]] = True
    return occ


def voxelize_occupancy(mesh: TriangleMesh, resolution: int = DEFAULT_RESOLUTION,
                       lo: float = -1.0, hi: float = 1.0, surface_shell: bool = True) -> VoxelGrid:
    """Solid occupancy on a ``resolution**3`` grid of voxel centers.

    A voxel is inside when at least two of the +x, +y, +z crossing-parity rays
    through its center say so.  Voxels whose center is within half a voxel of
    the surface are always occupied unless ``surface_shell`` is off.
    """
    if resolution < 1:
        raise InvalidArgument("resolution must be >= 1")
    grid = VoxelGrid.cube_centers(resolution, lo, hi, bool)
    if mesh.is_empty:
        return grid
    h = grid.spacing
    c = mesh.corners()
    votes = np.zeros((resolution,) * 3, np.int8)
    for axis in range(3):
        votes += _parity_axis(c, axis, resolution, lo, h)
    occ = votes >= 2
    if surface_shell:
        occ |= surface_voxels(mesh, resolution, lo, hi)
    grid.data[...] = occ
    return grid


def _check_pair(a: VoxelGrid, b: VoxelGrid):
    if a.data.shape != b.data.shape:
        raise InvalidArgument(f"resolution mismatch: {a.data.shape} vs {b.data.shape}")


def iou(a: VoxelGrid, b: VoxelGrid) -> float:
    _check_pair(a, b)
    x = a.data.astype(bool)
    y = b.data.astype(bool)
    union = np.count_nonzero(x | y)
    if union == 0:
        return 1.0
    return np.count_nonzero(x & y) / union


def distance_transform(grid: VoxelGrid) -> np.ndarray:
    """Exact Euclidean distance, in voxels, from each voxel center to the nearest occupied one."""
    occ = grid.data.astype(bool)
    if not occ.any():
        raise UndefinedDistanceField("distance field of an empty occupancy grid is undefined")
    return ndimage.distance_transform_edt(~occ)


def l2_distance_fields(a: VoxelGrid, b: VoxelGrid) -> float:
    """Per-voxel RMS difference of the two unsigned distance transforms."""
    _check_pair(a, b)
    d = distance_transform(a) - distance_transform(b)
    return float(np.sqrt(np.mean(d * d)))


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, n_samples: int = DEFAULT_SAMPLES,
                    resolution: int = DEFAULT_RESOLUTION, seed: int = 0) -> MetricReport:
    """All three metrics for a predicted mesh against ground truth."""
    ss = np.random.SeedSequence(seed)
    s_pred, s_gt = ss.spawn(2)
    cd = chamfer(sample_surface(pred, n_samples, s_pred), sample_surface(gt, n_samples, s_gt))
    vp = voxelize_occupancy(pred, resolution)
    vg = voxelize_occupancy(gt, resolution)
    return MetricReport(
        chamfer=cd, iou=iou(vp, vg), l2=l2_distance_fields(vp, vg),
        n_samples=n_samples, resolution=resolution, seed=int(seed),
        pred_occupied=int(vp.data.sum()), gt_occupied=int(vg.data.sum()))
