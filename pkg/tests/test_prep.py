import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from indifield.errors import DegenerateInput, InvalidArgument
from indifield.geom import OrientedPointCloud, SensorSet
from indifield.prep import (NormalizationTransform, VectorFieldEstimator, estimate_normals_pca,
                            lattice_subsample, normalize_to_unit_cube, query_vector_field,
                            sample_empty_space, sample_rays)
from indifield.scanner import orbit_cameras, scan
from indifield.shapes import icosphere


def fibonacci_sphere(n, r=1.0):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    th = np.pi * (1 + 5 ** 0.5) * i
    rho = np.sqrt(1 - z * z)
    return r * np.c_[rho * np.cos(th), rho * np.sin(th), z]


def angle(a, b):
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.arccos(np.clip(np.sum(a * b, -1), -1, 1))


# normals

def test_pca_plane_normals_inward():
    rng = np.random.default_rng(0)
    p = np.c_[rng.random((200, 2)), np.zeros(200)]
    c = OrientedPointCloud(p, None, np.zeros(200, int))
    out = estimate_normals_pca(c, SensorSet([[0.5, 0.5, 5.0]]), k=10)
    assert len(out) == 200
    assert np.allclose(out.normals, [0, 0, -1], atol=1e-9)


def test_pca_overwrites_existing_normals():
    rng = np.random.default_rng(1)
    p = np.c_[rng.random((50, 2)), np.zeros(50)]
    c = OrientedPointCloud(p, np.tile([1.0, 0, 0], (50, 1)), np.zeros(50, int))
    out = estimate_normals_pca(c, SensorSet([[0, 0, -3.0]]), k=8)
    assert np.allclose(out.normals, [0, 0, 1], atol=1e-9)


@pytest.mark.parametrize("sampling", ["random", "fibonacci"])
def test_pca_sphere_normals_point_to_center(sampling):
    n, r = 10000, 0.5
    if sampling == "random":
        p = np.random.default_rng(2).normal(size=(n, 3))
        p = r * p / np.linalg.norm(p, axis=1, keepdims=True)
    else:
        p = fibonacci_sphere(n, r)
    ids = np.arange(n)
    out = estimate_normals_pca(OrientedPointCloud(p, None, ids), SensorSet(200 * p, ids=ids), 20)
    err = angle(out.normals, -p)
    assert err.mean() < 1e-2
    if sampling == "fibonacci":
        assert np.mean(err < 1e-2) > 0.999


def test_pca_k_too_large():
    c = OrientedPointCloud(np.random.default_rng(3).random((10, 3)), None, np.zeros(10, int))
    with pytest.raises(InvalidArgument):
        estimate_normals_pca(c, SensorSet([[0, 0, 5.0]]), k=10)


def test_pca_collinear_points_dropped():
    p = np.c_[np.linspace(0, 1, 30), np.zeros(30), np.zeros(30)]
    c = OrientedPointCloud(p, None, np.zeros(30, int))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = estimate_normals_pca(c, SensorSet([[0, 0, 5.0]]), k=5)
    assert len(out) == 0 and any("degenerate" in str(x.message) for x in w)


# vector field estimator

def test_single_cluster_returns_shared_normal_exactly():
    rng = np.random.default_rng(4)
    p = rng.random((40, 3)) * 0.01
    for n, tol in (([0.0, 0.0, 1.0], 0.0), ([0.6, 0.0, 0.8], 2e-16)):
        est = VectorFieldEstimator(p, np.tile(n, (40, 1)), k=20)
        v = query_vector_field(est, [0.005, 0.005, 0.005])
        # a general direction picks up at most one rounding step from renormalization
        assert np.max(np.abs(v - n)) <= tol


def test_double_sided_sheet_picks_nearest_cluster():
    # 10 points with +z normals at z=0, 10 with -z normals at z=0.004; query just below z=0
    g = np.array([[x, y] for x in range(-2, 3) for y in range(-1, 1)], float) * 0.002
    near = np.c_[g, np.zeros(10)]
    far = np.c_[g, np.full(10, 0.004)]
    pts = np.vstack([near, far])
    nrm = np.vstack([np.tile([0, 0, 1.0], (10, 1)), np.tile([0, 0, -1.0], (10, 1))])
    est = VectorFieldEstimator(pts, nrm, k=20)
    _, d = est.tree.knn([0, 0, -0.001], 20)
    assert np.all(d[0, :10] < d[0, 10:].min())  # hand check: the +z sheet is strictly closer
    assert np.array_equal(query_vector_field(est, [0, 0, -0.001]), [0, 0, 1.0])
    # from above the far sheet the answer flips
    assert np.array_equal(query_vector_field(est, [0, 0, 0.005]), [0, 0, -1.0])


def test_undefined_beyond_near_radius():
    est = VectorFieldEstimator(np.zeros((1, 3)), [[0, 0, 1.0]], k=1, near_surface_radius=0.05)
    assert query_vector_field(est, [0, 0, 0.051]) is None
    assert query_vector_field(est, [0, 0, 0.049]) is not None
    v, ok = est.query([[0, 0, 0.2], [0, 0, 0.01]])
    assert ok.tolist() == [False, True] and np.all(v[0] == 0)


def test_gaussian_weighting_by_hand():
    # two members of one cluster at distances 1 and 2 from the query, sigma fixed at 1
    pts = np.array([[1.0, 0, 0], [2.0, 0, 0]])
    a = np.array([0, 0, 1.0])
    b = np.array([0, np.sin(0.5), np.cos(0.5)])
    est = VectorFieldEstimator(pts, [a, b], k=2, sigma=1.0, near_surface_radius=10)
    expect = np.exp(-0.5) * a + np.exp(-2.0) * b
    expect /= np.linalg.norm(expect)
    assert np.allclose(query_vector_field(est, [0, 0, 0]), expect, atol=1e-15)


def test_running_mean_vs_seed_membership():
    # normals at 0, 50 and 70 degrees about x: the third is within 60 degrees of the
    # two-member running mean (25 degrees) but not of the seed
    def rot(deg):
        t = np.radians(deg)
        return np.array([0, np.sin(t), np.cos(t)])
    pts = np.array([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]])
    nrm = np.array([rot(0), rot(50), rot(70)])
    mean = VectorFieldEstimator(pts, nrm, k=3, sigma=1e3, near_surface_radius=1)
    seed = VectorFieldEstimator(pts, nrm, k=3, sigma=1e3, near_surface_radius=1, compare_to="seed")
    vm = query_vector_field(mean, [0, 0, 0])
    vs = query_vector_field(seed, [0, 0, 0])
    w = np.exp(-np.array([0.01, 0.04, 0.09]) / 2e6)
    three = w @ nrm / np.linalg.norm(w @ nrm)
    two = w[:2] @ nrm[:2] / np.linalg.norm(w[:2] @ nrm[:2])
    assert np.allclose(vm, three, atol=1e-12)
    assert np.allclose(vs, two, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 25))
def test_estimator_unit_or_undefined(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.random((30, 3))
    nrm = rng.normal(size=(30, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    est = VectorFieldEstimator(pts, nrm, k=k, near_surface_radius=0.1)
    v, ok = est.query(rng.random((50, 3)) * 1.4 - 0.2)
    assert np.all(np.isfinite(v))
    assert np.allclose(np.linalg.norm(v[ok], axis=1), 1)
    assert np.all(v[~ok] == 0)


def test_estimator_sphere_mean_error_below_two_degrees():
    cams = orbit_cameras([0, 0, 0], 2.0, 20, width=96, height=72)
    cloud, _ = scan(icosphere(0.5, 5), cams, seed=0)
    est = VectorFieldEstimator.from_cloud(cloud)
    p = cloud.points[:: max(1, len(cloud) // 3000)].astype(float)
    v, ok = est.query(p)
    assert ok.all()
    assert np.degrees(angle(v, -p)).mean() < 2.0


def test_estimator_validation():
    with pytest.raises(InvalidArgument):
        VectorFieldEstimator(np.zeros((2, 3)), np.zeros((1, 3)))
    with pytest.raises(InvalidArgument):
        VectorFieldEstimator(np.zeros((1, 3)), [[0, 0, 1.0]], k=0)
    with pytest.raises(InvalidArgument):
        VectorFieldEstimator(np.zeros((1, 3)), [[0, 0, 1.0]], sigma=0)
    with pytest.raises(InvalidArgument):
        VectorFieldEstimator.from_cloud(OrientedPointCloud(np.zeros((3, 3))))


# empty-space sampling

def test_single_ray_six_samples():
    cloud = OrientedPointCloud([[0, 0, 1.0]], [[0, 0, 1.0]], [0])
    es = sample_empty_space(cloud, SensorSet([[0, 0, 0.0]]), seed=0)
    q = es.points
    assert len(q) == 6 and es.near_count == 2
    assert np.all(q[:, :2] == 0)
    assert np.all((q[:, 2] > 0) & (q[:, 2] < 1))
    assert np.sum(1 - q[:, 2] < 0.02) >= 2


def test_degenerate_ray_skipped():
    cloud = OrientedPointCloud([[0, 0, 0.0], [0, 0, 1.0]], [[0, 0, 1.0]] * 2, [0, 0])
    es = sample_empty_space(cloud, SensorSet([[0, 0, 0.0]]), seed=0)
    assert es.skipped_rays == 1 and len(es) == 6


def test_sample_rays_validation():
    with pytest.raises(InvalidArgument):
        sample_rays([[0, 0, 1.0]], [[0, 0, 0.0]], per_ray=1, near_count=2)
    with pytest.raises(InvalidArgument):
        lattice_subsample(np.zeros((2, 3)), 0)


def test_samples_on_open_segments_and_near_band():
    rng = np.random.default_rng(5)
    p = rng.normal(size=(2000, 3))
    s = rng.normal(size=(2000, 3)) * 3
    p[:10] = s[:10] + 0.005 * rng.normal(size=(10, 3))  # rays shorter than the band
    q, ray, near, _ = sample_rays(p, s, seed=1)
    seg = p[ray] - s[ray]
    t = np.sum((q - s[ray]) * seg, 1) / np.sum(seg * seg, 1)
    perp = np.linalg.norm(q - (s[ray] + t[:, None] * seg), axis=1)
    assert np.all((t > 0) & (t < 1)) and perp.max() < 1e-12
    dist = np.linalg.norm(q - p[ray], axis=1)
    assert np.all(dist[near] <= 0.02 + 1e-12)
    per = np.bincount(ray, weights=dist < 0.02)
    assert np.all(per >= 2)


def test_lattice_one_per_cell_and_first_kept():
    rng = np.random.default_rng(6)
    pts = rng.random((5000, 3)) * 0.02
    keep = lattice_subsample(pts, 0.001)
    cells = np.floor(pts[keep] / 0.001).astype(int)
    assert len(np.unique(cells, axis=0)) == len(keep)
    all_cells = np.floor(pts / 0.001).astype(int)
    assert len(np.unique(all_cells, axis=0)) == len(keep)
    _, first = np.unique(all_cells, axis=0, return_index=True)
    assert np.array_equal(keep, np.sort(first))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 6), st.integers(2, 5))
def test_finer_lattice_never_keeps_fewer(seed, e, factor):
    # refinement by an integer factor nests the cells, so no cell can merge
    res = 2.0 ** -e
    pts = np.random.default_rng(seed).random((500, 3))
    assert len(lattice_subsample(pts, res / factor)) >= len(lattice_subsample(pts, res))


def test_cap_enforced_and_deterministic():
    rng = np.random.default_rng(7)
    p = rng.random((3000, 3))
    cloud = OrientedPointCloud(p, None, np.zeros(3000, int))
    sens = SensorSet([[0.5, 0.5, 3.0]])
    a = sample_empty_space(cloud, sens, max_points=1000, seed=3)
    b = sample_empty_space(cloud, sens, max_points=1000, seed=3)
    c = sample_empty_space(cloud, sens, max_points=1000, seed=4)
    assert len(a) == 1000 and a.dedup_count > 1000
    assert a.points.tobytes() == b.points.tobytes()
    assert not np.array_equal(a.points, c.points)


def test_million_rays_default_constants():
    rng = np.random.default_rng(8)
    n = 1_000_000
    p = rng.random((n, 3)) * 4
    ids = rng.integers(0, 10, n)
    sens = SensorSet(rng.random((10, 3)) * 4 + [0, 0, 4])
    es = sample_empty_space(OrientedPointCloud(p, None, ids), sens, seed=0)
    assert es.raw_count == 6 * n and len(es) <= 4_000_000
    cells = np.floor(es.points / 0.001).astype(np.int64)
    key = (cells[:, 0] * 10 ** 5 + cells[:, 1]) * 10 ** 5 + cells[:, 2]
    assert len(np.unique(key)) == len(es)


def test_no_empty_sample_inside_scanned_sphere():
    cams = orbit_cameras([0, 0, 0], 2.0, 12, width=64, height=48)
    cloud, sensors = scan(icosphere(0.5, 5), cams, seed=0)
    es = sample_empty_space(cloud, sensors, seed=0)
    mesh = icosphere(0.5, 5)
    # every sample precedes a surface hit, so none may enter the polyhedron's inscribed ball
    fn = mesh.face_normals()
    inner = np.min(np.abs(np.sum(fn * mesh.vertices[mesh.triangles[:, 0]], axis=1)))
    assert len(es) > 1000
    assert np.all(np.linalg.norm(es.points, axis=1) > inner)


# normalization

def test_normalize_cube_0_2():
    g = np.array([[x, y, z] for x in (0, 2) for y in (0, 2) for z in (0, 2)], float)
    c, _, _, tf = normalize_to_unit_cube(OrientedPointCloud(g))
    assert tf.scale == 1.0 and np.array_equal(tf.translation, [-1, -1, -1])
    assert c.points.min() == -1 and c.points.max() == 1


def test_normalize_anisotropic_box():
    p = np.array([[0, 0, 0], [4, 2, 1]], float)
    sens = SensorSet([[2, 1, 3.0]])
    c, s, _, tf = normalize_to_unit_cube(OrientedPointCloud(p), sens)
    assert tf.scale == 0.5
    assert np.allclose(c.points[:, 1], [-0.5, 0.5])
    assert np.allclose(c.points[:, 2], [-0.25, 0.25])
    assert np.allclose(s.positions, [[0, 0, 1.25]])


def test_normalize_applies_same_transform_everywhere():
    rng = np.random.default_rng(9)
    p = rng.random((100, 3)) * [3, 1, 2] + 5
    n = np.tile([0, 0, 1.0], (100, 1))
    cloud = OrientedPointCloud(p, n, np.zeros(100, int))
    sens = SensorSet([[6, 6, 9.0]])
    es = sample_empty_space(cloud, sens, seed=0)
    c, s, e, tf = normalize_to_unit_cube(cloud, sens, es)
    assert np.allclose(e.points, tf.apply(es.points))
    assert np.allclose(s.positions, tf.apply(sens.positions))
    assert np.array_equal(c.normals, cloud.normals)
    assert np.allclose(tf.inverse(tf.apply(p)), p, atol=1e-6)
    assert np.abs(c.points).max() <= 1 + 1e-6


def test_normalize_degenerate_and_transform_dict():
    with pytest.raises(DegenerateInput):
        normalize_to_unit_cube(OrientedPointCloud(np.ones((4, 3))))
    tf = NormalizationTransform(0.25, [1, 2, 3])
    assert NormalizationTransform.from_dict(tf.to_dict()).to_dict() == tf.to_dict()
    with pytest.raises(InvalidArgument):
        NormalizationTransform(0)
