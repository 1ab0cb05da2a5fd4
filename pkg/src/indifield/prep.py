"""Training signals derived from a raw scan.

* PCA normal estimation with sensor-based orientation,
* the cluster-based gradient-field estimator used as the target for
  the field's input gradient,
* empty-space samples drawn on sensor-to-surface segments,
* the similarity transform into the unit cube.

Normals follow the inward convention throughout: ``dot(n, p - sensor) > 0``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, InvalidArgument
from .geom import KdTree, OrientedPointCloud, SensorSet, as_points


def estimate_normals_pca(cloud: OrientedPointCloud, sensors: SensorSet, k: int = 20,
                         degenerate_tol: float = 1e-10) -> OrientedPointCloud:
    """Plane-fit normals from each point and its ``k`` nearest neighbours.

    The smallest-eigenvalue eigenvector of the neighbourhood covariance is
    turned toward the point's sensor and then flipped to point inward.
    Points whose neighbourhood is (numerically) collinear are dropped with a
    warning; existing normals are overwritten.
    """
    n = len(cloud)
    if k < 1 or n < k + 1:
        raise InvalidArgument(f"PCA normals need at least k+1={k + 1} points, cloud has {n}")
    sensor_pos = sensors.lookup(cloud.sensor_ids)
    pts = cloud.points.astype(np.float64)
    tree = KdTree(pts)
    idx, _ = tree.knn(pts, k + 1)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[:, :, 0]
    # collinear neighbourhoods have two vanishing eigenvalues
    bad = evals[:, 1] <= degenerate_tol * np.maximum(evals[:, 2], 1e-300)
    toward_sensor = np.sum(normal * (sensor_pos - pts), axis=1)
    normal = np.where((toward_sensor < 0)[:, None], -normal, normal)
    normal = -normal
    keep = ~bad
    if bad.any():
        warnings.warn(f"dropped {int(bad.sum())} points with degenerate PCA neighbourhoods")
    normal = normal / np.linalg.norm(normal, axis=1, keepdims=True)
    return OrientedPointCloud(cloud.points[keep], normal[keep], cloud.sensor_ids[keep])


class VectorFieldEstimator:
    """Gradient-field targets from oriented points via greedy normal clustering.

    For a query ``x`` the ``k`` nearest oriented points are visited by
    increasing distance.  Each joins the first cluster whose current normal is
    within ``cluster_angle`` (radians) of its own, else it opens a new cluster.
    A cluster's normal is the gaussian-weighted mean of its members
    (bandwidth: mean neighbour distance unless ``sigma`` is fixed); the
    cluster nearest to ``x`` answers.  Queries farther than
    ``near_surface_radius`` from every point are undefined.
    """

    def __init__(self, points, normals, k: int = 20, cluster_angle: float = np.radians(60.0),
                 sigma: float | None = None, near_surface_radius: float = 0.05,
                 compare_to: str = "mean"):
        if k < 1:
            raise InvalidArgument("k must be >= 1")
        if sigma is not None and not sigma > 0:
            raise InvalidArgument("sigma must be positive")
        if compare_to not in ("mean", "seed"):
            raise InvalidArgument("compare_to must be 'mean' or 'seed'")
        self.tree = KdTree(points)
        self.normals = np.asarray(normals, np.float64).reshape(-1, 3)
        if len(self.normals) != len(self.tree):
            raise InvalidArgument("one normal per point required")
        self.k = k
        self.cluster_angle = float(cluster_angle)
        self.sigma = sigma
        self.near_surface_radius = float(near_surface_radius)
        self.compare_to = compare_to

    @classmethod
    def from_cloud(cls, cloud: OrientedPointCloud, **kw) -> "VectorFieldEstimator":
        if cloud.needs_normals:
            raise InvalidArgument("cloud has no normals; estimate them first")
        return cls(cloud.points, cloud.normals, **kw)

    def query(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Batched query: ``(targets (Q, 3), defined (Q,))``; undefined rows are zero."""
        q = as_points(x)
        idx, d = self.tree.knn(q, self.k)
        defined = d[:, 0] <= self.near_surface_radius
        out = np.zeros((len(q), 3))
        if defined.any():
            out[defined] = self._cluster(idx[defined], d[defined])
        return out, defined

    def _cluster(self, idx: np.ndarray, d: np.ndarray) -> np.ndarray:
        Q, k = idx.shape
        nb = self.normals[idx]
        if self.sigma is None:
            sigma = d.mean(axis=1)
            sigma = np.where(sigma > 0, sigma, 1.0)
        else:
            sigma = np.full(Q, self.sigma)
        w = np.exp(-(d * d) / (2.0 * sigma[:, None] ** 2))
        cos_thr = np.cos(self.cluster_angle)
        sums = np.zeros((Q, k, 3))
        seeds = np.zeros((Q, k, 3))
        mind = np.full((Q, k), np.inf)
        count = np.zeros(Q, np.int64)
        rows = np.arange(Q)
        slots = np.arange(k)[None, :]
        for j in range(k):
            nj = nb[:, j]
            if self.compare_to == "seed":
                ref = seeds
            else:
                norm = np.linalg.norm(sums, axis=-1, keepdims=True)
                ref = np.where(norm > 0, sums / np.where(norm > 0, norm, 1.0), seeds)
            cos = np.einsum("qci,qi->qc", ref, nj)
            match = (slots < count[:, None]) & (cos >= cos_thr)
            found = match.any(axis=1)
            target = np.where(found, np.argmax(match, axis=1), count)
            sums[rows, target] += w[:, j, None] * nj
            seeds[rows[~found], target[~found]] = nj[~found]
            mind[rows, target] = np.minimum(mind[rows, target], d[:, j])
            count += ~found
        best = np.argmin(mind, axis=1)
        v = sums[rows, best]
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        return np.where(norm > 0, v / np.where(norm > 0, norm, 1.0), seeds[rows, best])


def query_vector_field(est: VectorFieldEstimator, x):
    """Single query; returns a unit 3-vector or ``None`` when undefined."""
    v, ok = est.query(x)
    return v[0] if ok[0] else None


@dataclass
class EmptySampleSet:
    points: np.ndarray
    total_rays: int = 0
    skipped_rays: int = 0
    raw_count: int = 0
    near_count: int = 0
    dedup_count: int = 0

    def __len__(self) -> int:
        return len(self.points)


def _open_unit(rng, shape) -> np.ndarray:
    """Uniform samples on the open interval (0, 1)."""
    return rng.integers(1, 1 << 53, size=shape, dtype=np.int64) / float(1 << 53)


def sample_rays(points, sensor_positions, per_ray: int = 6, near_count: int = 2,
                near_band: float = 0.02, seed=None, eps: float = 1e-9):
    """Raw free-space samples on each open segment (sensor, point).

    Returns ``(samples (M, 3), ray_index (M,), is_near (M,), skipped)``.
    ``per_ray - near_count`` samples are uniform in ``t`` on the part of the
    segment farther than ``near_band`` from the point; ``near_count`` samples
    lie within ``near_band`` of the point on the sensor side.
    """
    if not (per_ray >= near_count >= 0):
        raise InvalidArgument("need per_ray >= near_count >= 0")
    if near_band < 0:
        raise InvalidArgument("near_band must be non-negative")
    p = np.asarray(points, np.float64).reshape(-1, 3)
    s = np.asarray(sensor_positions, np.float64).reshape(-1, 3)
    seg = p - s
    length = np.linalg.norm(seg, axis=1)
    ok = length > eps
    rays = np.flatnonzero(ok)
    p, s, seg, length = p[ok], s[ok], seg[ok], length[ok]
    rng = np.random.default_rng(seed)
    n_far = per_ray - near_count
    band = np.minimum(near_band, length)
    t_max = np.where(band < length, 1.0 - band / length, 1.0)
    t_far = _open_unit(rng, (len(rays), n_far)) * t_max[:, None]
    back = _open_unit(rng, (len(rays), near_count)) * band[:, None]
    t_near = 1.0 - back / length[:, None]
    t = np.concatenate([t_far, t_near], axis=1)
    q = s[:, None, :] + t[..., None] * seg[:, None, :]
    is_near = np.zeros(t.shape, bool)
    is_near[:, n_far:] = True
    ray_index = np.repeat(rays, per_ray)
    return q.reshape(-1, 3), ray_index, is_near.reshape(-1), int((~ok).sum())


def lattice_subsample(points, resolution: float) -> np.ndarray:
    """Indices (ascending) keeping the first point of every occupied lattice cell."""
    if not resolution > 0:
        raise InvalidArgument("lattice resolution must be positive")
    pts = np.asarray(points, np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, np.int64)
    cell = np.floor(pts / resolution).astype(np.int64)
    cell -= cell.min(axis=0)
    span = cell.max(axis=0) + 1
    if np.prod(span.astype(np.float64)) < 2 ** 62:
        key = (cell[:, 0] * span[1] + cell[:, 1]) * span[2] + cell[:, 2]
        _, first = np.unique(key, return_index=True)
    else:
        _, first = np.unique(cell, axis=0, return_index=True)
    return np.sort(first)


def sample_empty_space(cloud: OrientedPointCloud, sensors: SensorSet, per_ray: int = 6,
                       near_count: int = 2, near_band: float = 0.02, resolution: float = 0.001,
                       max_points: int = 4_000_000, seed=None) -> EmptySampleSet:
    """Free-space samples in scene units, deduplicated on a lattice and capped."""
    if max_points < 0:
        raise InvalidArgument("max_points must be non-negative")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    ray_seed, cap_seed = ss.spawn(2)
    sensor_pos = sensors.lookup(cloud.sensor_ids)
    q, _, is_near, skipped = sample_rays(cloud.points, sensor_pos, per_ray, near_count,
                                         near_band, ray_seed)
    keep = lattice_subsample(q, resolution)
    dedup = len(keep)
    if len(keep) > max_points:
        rng = np.random.default_rng(cap_seed)
        keep = np.sort(rng.choice(keep, max_points, replace=False))
    return EmptySampleSet(q[keep], len(cloud), skipped, len(q), int(is_near.sum()), dedup)


@dataclass
class NormalizationTransform:
    """``normalized = scale * world + translation`` (uniform similarity)."""

    scale: float
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.scale = float(self.scale)
        self.translation = np.asarray(self.translation, np.float64).reshape(3)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgument("scale must be positive and finite")

    def apply(self, p) -> np.ndarray:
        return np.asarray(p, np.float64) * self.scale + self.translation

    def inverse(self, p) -> np.ndarray:
        return (np.asarray(p, np.float64) - self.translation) / self.scale

    def to_dict(self) -> dict:
        return {"scale": self.scale, "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormalizationTransform":
        return cls(d["scale"], d["translation"])

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls(1.0)


def fit_unit_cube(points, padding: float = 0.0) -> NormalizationTransform:
    """Transform taking the bounding box's longest axis to ``[-1 + padding, 1 - padding]``."""
    p = as_points(points)
    lo, hi = p.min(axis=0), p.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise DegenerateInput("point bounds have zero extent")
    if not 0 <= padding < 1:
        raise InvalidArgument("padding must lie in [0, 1)")
    scale = 2.0 * (1.0 - padding) / extent
    return NormalizationTransform(scale, -0.5 * (lo + hi) * scale)


def normalize_to_unit_cube(cloud: OrientedPointCloud, sensors: SensorSet | None = None,
                           empties: EmptySampleSet | None = None, padding: float = 0.0):
    """Map cloud, sensors and empty samples with one similarity transform.

    Returns ``(cloud, sensors, empties, transform)``; normals are unchanged.
    """
    tf = fit_unit_cube(cloud.points, padding)
    out_cloud = OrientedPointCloud(tf.apply(cloud.points),
                                   cloud.normals if len(cloud.normals) else None,
                                   cloud.sensor_ids)
    out_sensors = None
    if sensors is not None:
        out_sensors = SensorSet(tf.apply(sensors.positions), sensors.orientations, sensors.ids)
    out_empty = None
    if empties is not None:
        e = empties
        out_empty = EmptySampleSet(tf.apply(e.points).reshape(-1, 3), e.total_rays, e.skipped_rays,
                                   e.raw_count, e.near_count, e.dedup_count)
    return out_cloud, out_sensors, out_empty, tf
