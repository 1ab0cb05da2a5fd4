"""Virtual depth scanning of triangle meshes.

Cameras use the pinhole convention x-right, y-down, z-forward; ``rotation``
maps camera-frame vectors to world space (columns: right, down, forward).
Depth is the camera-frame z coordinate of the hit, 0 where nothing is hit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyScene, InvalidArgument
from .geom import OrientedPointCloud, SensorSet, TriangleMesh

WORLD_UP = np.array([0.0, 0.0, 1.0])
NEAR = 1e-6
_BLOCK_ELEMS = 1 << 18


@dataclass
class Camera:
    position: np.ndarray
    rotation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    sensor_id: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, np.float64).reshape(3, 3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise InvalidArgument("image must be at least 2x2 pixels")

    @classmethod
    def looking(cls, position, forward, width=320, height=240, vfov=60.0, up=WORLD_UP, sensor_id=0):
        """Camera at ``position`` looking along ``forward`` with square pixels."""
        rot = look_rotation(forward, up)
        fy = 0.5 * height / np.tan(np.radians(vfov) / 2)
        return cls(position, rot, fy, fy, (width - 1) / 2, (height - 1) / 2, width, height, sensor_id)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def quaternion(self) -> np.ndarray:
        """Orientation as a unit quaternion (w, x, y, z)."""
        return _matrix_to_quaternion(self.rotation)

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with unit z, shape ``(H, W, 3)``."""
        u = (np.arange(self.width) - self.cx) / self.fx
        v = (np.arange(self.height) - self.cy) / self.fy
        d = np.ones((self.height, self.width, 3))
        d[..., 0] = u[None, :]
        d[..., 1] = v[:, None]
        return d

    def back_project(self, u, v, depth) -> np.ndarray:
        u, v, depth = (np.asarray(a, np.float64) for a in (u, v, depth))
        return np.stack([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth], -1)

    def project(self, p_cam) -> np.ndarray:
        """Camera-frame points to ``(u, v, depth)``."""
        p = np.asarray(p_cam, np.float64)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy, z], -1)

    def to_camera(self, p_world) -> np.ndarray:
        return (np.asarray(p_world, np.float64) - self.position) @ self.rotation

    def to_world(self, p_cam) -> np.ndarray:
        return np.asarray(p_cam, np.float64) @ self.rotation.T + self.position


@dataclass
class DepthMap:
    depth: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.depth = np.asarray(self.depth, np.float64)
        if self.depth.shape != (self.camera.height, self.camera.width):
            raise InvalidArgument("depth map shape does not match camera")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise InvalidArgument("depths must be finite and non-negative")


def look_rotation(forward, up=WORLD_UP) -> np.ndarray:
    f = np.asarray(forward, np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(f, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def _matrix_to_quaternion(r: np.ndarray) -> np.ndarray:
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k])
        q = np.zeros(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    q = np.asarray(q, np.float64)
    return q / np.linalg.norm(q)


def sample_cameras(scene_bounds, spacing: float = 1.5, tilts=(30.0, -30.0),
                   yaws=(0.0, 90.0, 180.0, 270.0), height: float = 1.5,
                   width: int = 320, image_height: int = 240, vfov: float = 60.0) -> list[Camera]:
    """Room-style camera grid.

    Grid positions are spaced ``spacing`` apart on the horizontal plane at
    ``height`` above the bounds' floor.  Each position gets a level camera plus
    one per tilt (degrees, positive looks up), each at every yaw heading.
    """
    if not spacing > 0:
        raise InvalidArgument("camera spacing must be positive")
    lo, hi = (np.asarray(b, np.float64).reshape(3) for b in scene_bounds)
    ext = hi - lo
    if not (np.all(np.isfinite(ext)) and np.all(ext >= 0) and np.any(ext[:2] > 0)):
        raise EmptyScene(f"degenerate scene bounds {lo.tolist()} .. {hi.tolist()}")
    center = 0.5 * (lo + hi)
    axes = []
    for a in range(2):
        n = int(np.floor(ext[a] / spacing + 1e-9)) + 1
        axes.append(center[a] + (np.arange(n) - (n - 1) / 2) * spacing)
    pitches = [0.0] + [float(t) for t in tilts]
    cams = []
    for x in axes[0]:
        for y in axes[1]:
            pos = np.array([x, y, lo[2] + height])
            for pitch in pitches:
                for yaw in yaws:
                    p, w = np.radians(pitch), np.radians(yaw)
                    fwd = [np.cos(p) * np.cos(w), np.cos(p) * np.sin(w), np.sin(p)]
                    cams.append(Camera.looking(pos, fwd, width, image_height, vfov, sensor_id=len(cams)))
    return cams


def orbit_cameras(center, distance: float, count: int, min_elevation: float = -90.0,
                  max_elevation: float = 90.0, width: int = 320, height: int = 240,
                  vfov: float = 60.0) -> list[Camera]:
    """Cameras on a Fibonacci sphere around ``center``, all looking at it.

    Elevations (degrees) outside ``[min_elevation, max_elevation]`` are skipped
    before counting, so exactly ``count`` cameras are returned.
    """
    center = np.asarray(center, np.float64)
    lo, hi = np.sin(np.radians(min_elevation)), np.sin(np.radians(max_elevation))
    i = np.arange(count) + 0.5
    z = hi - (hi - lo) * i / count
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(np.clip(1 - z * z, 0, None))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)
    return [Camera.looking(center + distance * d, -d, width, height, vfov, sensor_id=k)
            for k, d in enumerate(dirs)]


def render_depth(mesh: TriangleMesh, cam: Camera, noise_std: float = 0.0, seed=None) -> DepthMap:
    """Exact nearest-hit depth per pixel center.

    Triangles are binned by their screen-space footprint and intersected with
    the pixel rays under that footprint (Moller-Trumbore), so every pixel sees
    every triangle that can cover it.
    """
    if mesh.is_empty:
        raise InvalidArgument("cannot render an empty mesh")
    W, H = cam.width, cam.height
    tri = cam.to_camera(mesh.vertices)[mesh.triangles]  # (T, 3, 3)
    z = tri[..., 2]
    front = np.all(z > NEAR, axis=1)
    crossing = ~front & np.any(z > NEAR, axis=1)
    depth = np.full(H * W, np.inf)

    if front.any():
        t_front = np.flatnonzero(front)
        uvz = cam.project(tri[t_front])
        u0 = np.clip(np.floor(uvz[..., 0].min(1)), 0, W).astype(np.int64)
        u1 = np.clip(np.ceil(uvz[..., 0].max(1)), -1, W - 1).astype(np.int64)
        v0 = np.clip(np.floor(uvz[..., 1].min(1)), 0, H).astype(np.int64)
        v1 = np.clip(np.ceil(uvz[..., 1].max(1)), -1, H - 1).astype(np.int64)
        su, sv = u1 - u0 + 1, v1 - v0 + 1
        keep = (su > 0) & (sv > 0)
        t_front, u0, v0, su, sv = t_front[keep], u0[keep], v0[keep], su[keep], sv[keep]
        size = np.maximum(su, sv)
        bucket = np.ceil(np.log2(np.maximum(size, 1))).astype(np.int64)
        for b in np.unique(bucket):
            sel = np.flatnonzero(bucket == b)
            s = int(2 ** b)
            per = max(1, _BLOCK_ELEMS // (s * s))
            for c in range(0, len(sel), per):
                idx = sel[c:c + per]
                _hit_block(depth, cam, tri[t_front[idx]], u0[idx], v0[idx], su[idx], sv[idx], s)
    for t in np.flatnonzero(crossing):
        _hit_block(depth, cam, tri[t:t + 1], np.array([0]), np.array([0]),
                   np.array([W]), np.array([H]), max(W, H))

    depth[~np.isfinite(depth)] = 0.0
    depth = depth.reshape(H, W)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        hit = depth > 0
        depth[hit] = np.maximum(depth[hit] + rng.normal(0, noise_std, hit.sum()), NEAR)
    return DepthMap(depth, cam)


def _hit_block(depth, cam, tri, u0, v0, su, sv, s):
    """Intersect triangles ``tri`` (camera frame) with the pixel windows given."""
    off = np.arange(s)
    uu = u0[:, None, None] + off[None, None, :]
    vv = v0[:, None, None] + off[None, :, None]
    valid = (off[None, None, :] < su[:, None, None]) & (off[None, :, None] < sv[:, None, None])
    valid &= (uu < cam.width) & (vv < cam.height)
    dx = (uu - cam.cx) / cam.fx
    dy = (vv - cam.cy) / cam.fy
    dx, dy = np.broadcast_arrays(dx, dy)
    a = tri[:, 0][:, None, None, :]
    e1 = (tri[:, 1] - tri[:, 0])[:, None, None, :]
    e2 = (tri[:, 2] - tri[:, 0])[:, None, None, :]
    d = np.stack([dx, dy, np.ones_like(dx)], -1)
    p = np.cross(d, e2)
    det = np.sum(e1 * p, -1)
    ok = valid & (np.abs(det) > 1e-15)
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = -a
    bu = np.sum(tvec * p, -1) * inv
    q = np.cross(tvec, e1)
    bv = np.sum(d * q, -1) * inv
    t = np.sum(e2 * q, -1) * inv
    tol = 1e-9
    ok &= (bu >= -tol) & (bv >= -tol) & (bu + bv <= 1 + tol) & (t > NEAR)
    pix = (vv * cam.width + uu)
    pix = np.broadcast_to(pix, ok.shape)[ok]
    np.minimum.at(depth, pix, t[ok])


def depth_to_oriented_points(depth: DepthMap, max_depth_jump: float | None = None) -> OrientedPointCloud:
    """Back-project a depth map to world points with inward normals.

    Normals come from central differences of neighbouring camera-space
    positions and are signed to point away from the sensor.  Pixels on the
    border, next to an invalid pixel, or (when ``max_depth_jump`` is given)
    next to a neighbour whose relative depth differs by more than that, are
    dropped.
    """
    cam = depth.camera
    d = depth.depth
    H, W = d.shape
    vv, uu = np.mgrid[0:H, 0:W]
    P = cam.back_project(uu, vv, d)
    valid = d > 0
    ok = np.zeros_like(valid)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                      & valid[2:, 1:-1] & valid[:-2, 1:-1])
    if max_depth_jump is not None:
        c = d[1:-1, 1:-1]
        for nb in (d[1:-1, 2:], d[1:-1, :-2], d[2:, 1:-1], d[:-2, 1:-1]):
            ok[1:-1, 1:-1] &= np.abs(nb - c) <= max_depth_jump * np.maximum(c, NEAR)
    n = np.zeros_like(P)
    n[1:-1, 1:-1] = np.cross(P[1:-1, 2:] - P[1:-1, :-2], P[2:, 1:-1] - P[:-2, 1:-1])
    pts, nrm = P[ok], n[ok]
    s = np.sum(nrm * pts, axis=1)
    nrm = np.where((s < 0)[:, None], -nrm, nrm)
    length = np.linalg.norm(nrm, axis=1)
    good = (length > 0) & (s != 0)
    pts, nrm = pts[good], nrm[good] / length[good, None]
    world_p = cam.to_world(pts)
    world_n = nrm @ cam.rotation.T
    world_n /= np.linalg.norm(world_n, axis=1, keepdims=True)
    ids = np.full(len(world_p), cam.sensor_id, np.int32)
    return OrientedPointCloud(world_p, world_n, ids)


def subsample(cloud: OrientedPointCloud, n: int, seed=None) -> OrientedPointCloud:
    """Uniform random subset of ``n`` points without replacement (order kept)."""
    if n < 1:
        raise InvalidArgument("subsample size must be >= 1")
    if len(cloud) <= n:
        return cloud
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(cloud), n, replace=False))
    return cloud.subset(idx)


def scan(mesh: TriangleMesh, cameras, n_points: int | None = None, seed=None,
         noise_std: float = 0.0, max_depth_jump: float | None = None):
    """Render every camera, merge the oriented points, optionally subsample.

    Returns ``(cloud, sensors)`` where sensor ids are the cameras' ``sensor_id``.
    """
    ss = np.random.SeedSequence(seed)
    render_seeds = ss.spawn(len(cameras) + 1)
    parts = []
    for cam, s in zip(cameras, render_seeds):
        dm = render_depth(mesh, cam, noise_std, s)
        parts.append(depth_to_oriented_points(dm, max_depth_jump))
    cloud = OrientedPointCloud.concatenate(parts)
    if n_points is not None:
        cloud = subsample(cloud, n_points, render_seeds[-1])
    sensors = SensorSet(
        np.array([c.position for c in cameras]).reshape(-1, 3),
        np.array([c.quaternion for c in cameras]).reshape(-1, 4),
        np.array([c.sensor_id for c in cameras], np.int64),
    )
    return cloud, sensors
