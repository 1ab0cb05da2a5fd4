"""End-to-end composition of the modules, shared by the CLI and the demos."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .config import PipelineConfig
from .errors import InvalidArgument, NumericalError
from .extract import extract_mesh
from .geom import OrientedPointCloud, SensorSet, TriangleMesh
from .metrics import MetricReport, evaluate_meshes
from .prep import (EmptySampleSet, NormalizationTransform, VectorFieldEstimator,
                   estimate_normals_pca, fit_unit_cube, normalize_to_unit_cube,
                   sample_empty_space)
from .scanner import orbit_cameras, sample_cameras, scan
from .siren import SirenField
from .train import LossReport, train

log = logging.getLogger(__name__)

# CLI spellings of the training modes
MODE_ALIASES = {
    "indicator": "indicator",
    "no-empty": "indicator_no_empty",
    "sdf": "sdf",
    "sdf-high": "sdf_high_offsurface",
}


def cameras_for(mesh: TriangleMesh, cfg: PipelineConfig):
    sc = cfg.scan
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    if sc.layout == "grid":
        return sample_cameras((lo, hi), sc.spacing, (sc.tilt, -sc.tilt), height=sc.height,
                              width=sc.width, image_height=sc.image_height, vfov=sc.vfov)
    center = 0.5 * (lo + hi)
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    return orbit_cameras(center, sc.orbit_distance * radius, sc.orbit_count, sc.min_elevation,
                         sc.max_elevation, sc.width, sc.image_height, sc.vfov)


def scan_mesh(mesh: TriangleMesh, cfg: PipelineConfig):
    """Virtual scan of ``mesh``; returns ``(cloud, sensors)`` in mesh units."""
    if mesh.is_empty:
        raise InvalidArgument("cannot scan an empty mesh")
    sc = cfg.scan
    cams = cameras_for(mesh, cfg)
    return scan(mesh, cams, sc.points, seed=cfg.seed, noise_std=sc.noise_std,
                max_depth_jump=sc.max_depth_jump)


@dataclass
class Reconstruction:
    field: SirenField
    transform: NormalizationTransform
    reports: list[LossReport]
    empties: EmptySampleSet | None = None
    stats: dict = field(default_factory=dict)


def prepare(cloud: OrientedPointCloud, sensors: SensorSet | None, cfg: PipelineConfig):
    """Normals (if needed), empty samples, normalization and the gradient-field estimator.

    Returns ``(cloud, sensors, empties, estimator, transform)`` in normalized units.
    """
    pc = cfg.prep
    if cloud.needs_normals:
        if not pc.estimate_normals:
            raise InvalidArgument("point cloud has no normals; enable normal estimation")
        if sensors is None:
            raise InvalidArgument("normal estimation needs sensor positions for orientation; "
                                  "provide a sensors file")
        cloud = estimate_normals_pca(cloud, sensors, pc.k)
    empties = None
    if cfg.train.uses_empty:
        if sensors is None:
            raise InvalidArgument(f"mode {cfg.train.mode!r} needs sensor positions for empty-space "
                                  "sampling; provide a sensors file")
        ss = np.random.SeedSequence([cfg.seed, 1])
        empties = sample_empty_space(cloud, sensors, pc.per_ray, pc.near_count, pc.near_band,
                                     pc.empty_res, pc.max_empty, seed=ss)
    ncloud, nsensors, nempties, tf = normalize_to_unit_cube(cloud, sensors, empties, pc.padding)
    est = VectorFieldEstimator.from_cloud(ncloud, k=pc.k, cluster_angle=np.radians(pc.cluster_angle),
                                          near_surface_radius=pc.near_radius)
    return ncloud, nsensors, nempties, est, tf


def reconstruct(cloud: OrientedPointCloud, sensors: SensorSet | None, cfg: PipelineConfig,
                callback=None) -> Reconstruction:
    ncloud, nsensors, nempties, est, tf = prepare(cloud, sensors, cfg)
    tcfg = cfg.train
    if tcfg.seed != cfg.seed:
        tcfg = replace(tcfg, seed=cfg.seed)
    stats = {"surface_points": len(ncloud)}
    if nempties is not None:
        stats.update(empty_points=len(nempties), empty_raw=nempties.raw_count,
                     empty_dedup=nempties.dedup_count, skipped_rays=nempties.skipped_rays)
    try:
        f, reports = train(ncloud, nsensors, nempties, est, tcfg, callback=callback)
    except NumericalError as exc:
        exc.transform = tf
        raise
    return Reconstruction(f, tf, reports, nempties, stats)


def extract(field_: SirenField, cfg: PipelineConfig, transform: NormalizationTransform | None = None):
    return extract_mesh(field_, cfg.extract, transform)


def evaluate(pred: TriangleMesh, gt: TriangleMesh, cfg: PipelineConfig,
             transform: NormalizationTransform | None = None) -> MetricReport:
    """Metrics in normalized units.

    Both meshes are mapped with ``transform`` (world to normalized); without
    one, the transform fitting the ground truth's bounds to ``[-1, 1]`` is used.
    """
    tf = transform if transform is not None else fit_unit_cube(gt.vertices)
    p = TriangleMesh(tf.apply(pred.vertices), pred.triangles) if not pred.is_empty else pred
    g = TriangleMesh(tf.apply(gt.vertices), gt.triangles)
    return evaluate_meshes(p, g, cfg.eval.samples, cfg.eval.resolution, cfg.seed)
