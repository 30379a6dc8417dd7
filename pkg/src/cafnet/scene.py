"""Synthetic driving frames, pinhole projection and lidar ground-truth construction.

Camera frame convention: x right, y down, z forward. Pixel ``(row, col)`` has its
centre at image coordinates ``(v, u) = (row, col)``, so a ray through pixel centre
``(row, col)`` has direction ``((col - cx) / fx, (row - cy) / fy, 1)``. Because the ray
direction has unit z, the ray parameter equals the camera-frame depth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError


def pixel_index(coord):
    """Round continuous image coordinates to the nearest pixel (half rounds up)."""
    return np.floor(np.asarray(coord, dtype=np.float64) + 0.5).astype(np.int64)


def yaw_matrix(yaw: float) -> np.ndarray:
    """Rotation about the vertical (y) axis, mapping box-local to camera coordinates."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"invalid image size {self.height}x{self.width}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(f"principal point ({self.cx}, {self.cy}) outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 70.0, cy_frac: float = 0.4):
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=cy_frac * height, width=width, height=height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self) -> np.ndarray:
        """H x W x 3 ray directions through pixel centres, z component 1."""
        rows, cols = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (cols - self.cx) / self.fx
        rays[..., 1] = (rows - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays

    def backproject(self, u, v, depth) -> np.ndarray:
        u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
        x = (u - self.cx) / self.fx * depth
        y = (v - self.cy) / self.fy * depth
        return np.stack([x, y, depth], axis=-1)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or np.linalg.det(r) <= 0:
            raise ConfigError("pose rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation


@dataclass(eq=False)
class RadarPoint:
    position: np.ndarray
    vx: float
    vy: float
    rcs: float
    is_ghost: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    @property
    def depth(self) -> float:
        return float(self.position[2])


@dataclass(eq=False)
class BBox3D:
    """Box with yaw about the vertical axis; ``corners2d`` is the clipped pixel box
    ``(x1, y1, x2, y2)`` with inclusive bounds."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    corners2d: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ConfigError(f"box size must be positive, got {self.size}")
        self.corners2d = tuple(int(c) for c in self.corners2d)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ yaw_matrix(self.yaw)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = self.to_local(np.atleast_2d(points))
        return np.all(np.abs(local) <= self.size / 2.0, axis=-1)

    def corners3d(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.center + (signs * self.size / 2.0) @ yaw_matrix(self.yaw).T

    def project_corners(self, intrinsics: CameraIntrinsics) -> tuple[int, int, int, int]:
        c = self.corners3d()
        if np.any(c[:, 2] <= 0):
            raise DataError("box extends behind the camera; cannot project its corners")
        u = intrinsics.fx * c[:, 0] / c[:, 2] + intrinsics.cx
        v = intrinsics.fy * c[:, 1] / c[:, 2] + intrinsics.cy
        x1, x2 = pixel_index(u.min()), pixel_index(u.max())
        y1, y2 = pixel_index(v.min()), pixel_index(v.max())
        w, h = intrinsics.width, intrinsics.height
        return (int(np.clip(x1, 0, w - 1)), int(np.clip(y1, 0, h - 1)),
                int(np.clip(x2, 0, w - 1)), int(np.clip(y2, 0, h - 1)))

    def ray_interval(self, rays: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Slab intersection of rays from the camera origin.

        Returns ``(t_enter, t_exit, axis)``; misses have ``t_enter = inf``. ``axis`` is the
        box-local axis of the entry face.
        """
        rot = yaw_matrix(self.yaw)
        origin = -self.center @ rot
        d = np.asarray(rays, dtype=np.float64) @ rot
        half = self.size / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - origin) / d
            t2 = (half - origin) / d
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        parallel = d == 0
        inside = np.abs(origin) <= half
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        t_enter = lo.max(axis=-1)
        t_exit = hi.min(axis=-1)
        axis = lo.argmax(axis=-1)
        hit = (t_enter <= t_exit) & (t_enter > 0)
        return np.where(hit, t_enter, np.inf), np.where(hit, t_exit, np.inf), axis


@dataclass(eq=False)
class Frame:
    image: np.ndarray
    radar_points: list[RadarPoint]
    lidar_depth: np.ndarray
    boxes: list[BBox3D]
    intrinsics: CameraIntrinsics
    pose: Pose
    sequence: int = 0
    index: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.lidar_depth.shape

    def radar_array(self) -> np.ndarray:
        """M x 6 array: x, y, z, vx, vy, rcs."""
        if not self.radar_points:
            return np.zeros((0, 6))
        return np.array([[*p.position, p.vx, p.vy, p.rcs] for p in self.radar_points], dtype=np.float64)


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 128
    n_objects: int = 5
    ghost_rate: float = 0.3
    n_frames: int = 1
    hfov_deg: float = 70.0
    camera_height: float = 1.5
    lidar_density: float = 0.2
    ego_speed: float = 0.5
    ego_lateral: float = 0.0
    frame_rate: float = 10.0
    d_max: float = 80.0
    max_radar_per_object: int = 3
    image_noise: float = 0.02

    def __post_init__(self):
        for name in ("height", "width"):
            value = getattr(self, name)
            if not (32 <= value <= 512) or value % 16:
                raise ConfigError(f"{name}={value} must lie in [32, 512] and be divisible by 16")
        if not (1 <= self.n_objects <= 10):
            raise ConfigError(f"n_objects={self.n_objects} must lie in [1, 10]")
        if not (0.0 <= self.ghost_rate <= 1.0):
            raise ConfigError(f"ghost_rate={self.ghost_rate} must lie in [0, 1]")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be at least 1")
        if not (0.0 < self.lidar_density <= 1.0):
            raise ConfigError("lidar_density must lie in (0, 1]")
        if self.max_radar_per_object < 1:
            raise ConfigError("max_radar_per_object must be at least 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**data)


class Projection(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    index: np.ndarray  # positions of the kept points in the input
    dropped: int

    @property
    def cols(self) -> np.ndarray:
        return pixel_index(self.u)

    @property
    def rows(self) -> np.ndarray:
        return pixel_index(self.v)


def project_points(points, intrinsics: CameraIntrinsics) -> Projection:
    """Pinhole projection; drops points behind the camera or outside the pixel grid."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * pts[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * pts[:, 1] / z + intrinsics.cy
    cols, rows = pixel_index(np.where(front, u, -1.0)), pixel_index(np.where(front, v, -1.0))
    keep = front & (cols >= 0) & (cols < intrinsics.width) & (rows >= 0) & (rows < intrinsics.height)
    idx = np.flatnonzero(keep)
    return Projection(u[idx], v[idx], z[idx], idx, int(len(pts) - len(idx)))


# --------------------------------------------------------------------------- rendering

def _ground_depth(rays: np.ndarray, pose: Pose, camera_height: float) -> np.ndarray:
    """Depth of the world plane y = camera_height along each ray (inf on a miss)."""
    normal = pose.rotation.T @ np.array([0.0, 1.0, 0.0])
    offset = camera_height - pose.translation[1]
    denom = rays @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = offset / denom
    return np.where((denom > 0) & (t > 0), t, np.inf)


def raycast(boxes: Sequence[BBox3D], intrinsics: CameraIntrinsics, pose: Pose, camera_height: float):
    """Z-buffer the ground plane and boxes.

    Returns ``(depth, owner, axis)`` where ``owner`` is -1 for no hit, 0 for ground and
    ``k + 1`` for box ``k``.
    """
    rays = intrinsics.pixel_rays()
    depth = _ground_depth(rays, pose, camera_height)
    owner = np.where(np.isfinite(depth), 0, -1)
    axis = np.full(depth.shape, -1)
    for k, box in enumerate(boxes):
        t, _, ax = box.ray_interval(rays)
        nearer = t < depth
        depth = np.where(nearer, t, depth)
        owner = np.where(nearer, k + 1, owner)
        axis = np.where(nearer, ax, axis)
    return depth, owner, axis


def _render_image(rng, depth, owner, axis, rays, pose, colors, config: SceneConfig) -> np.ndarray:
    h, w = depth.shape
    rows = np.arange(h, dtype=np.float64)[:, None] / h
    img = np.empty((h, w, 3))
    img[...] = np.array([0.45, 0.62, 0.88])
    img += (rows * 0.15)[..., None] * np.array([1.0, 0.8, 0.2])

    ground = owner == 0
    if ground.any():
        world = pose.apply(rays[ground] * depth[ground][:, None])
        checker = (np.floor(world[:, 0] / 2.0) + np.floor(world[:, 2] / 2.0)) % 2
        shade = (0.32 + 0.1 * checker) * (1.0 - 0.5 * np.minimum(depth[ground], config.d_max) / config.d_max)
        img[ground] = shade[:, None] * np.array([1.0, 0.98, 0.92])

    face_shade = np.array([0.75, 0.9, 1.0])  # entry axis x (side), y (top), z (front)
    for k, color in enumerate(colors):
        sel = owner == k + 1
        if sel.any():
            fade = 1.0 - 0.3 * np.minimum(depth[sel], config.d_max) / config.d_max
            img[sel] = color * (face_shade[axis[sel]] * fade)[:, None]

    img += rng.normal(0.0, config.image_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


_OBJECT_CLASSES = (
    # width, height, length, jitter
    (1.9, 1.6, 4.4, 0.15),
    (0.7, 1.75, 0.7, 0.1),
    (2.6, 3.3, 8.0, 0.1),
    (0.8, 1.4, 1.9, 0.1),
)


def _sample_layout(rng, config: SceneConfig, intrinsics: CameraIntrinsics, travel: float):
    tan_half = (intrinsics.width / 2.0) / intrinsics.fx
    placed = []
    for _ in range(config.n_objects):
        for _attempt in range(200):
            w, hgt, length, jitter = _OBJECT_CLASSES[rng.integers(len(_OBJECT_CLASSES))]
            size = np.array([w, hgt, length]) * (1.0 + rng.uniform(-jitter, jitter, size=3))
            z = rng.uniform(6.0 + travel + size[2] / 2.0, 45.0)
            x_span = max(0.0, 0.75 * z * tan_half - size[0] / 2.0)
            x = rng.uniform(-x_span, x_span)
            center = np.array([x, config.camera_height - size[1] / 2.0, z])
            clash = any(
                abs(center[0] - c[0]) < (size[0] + s[0]) / 2.0 + 0.5
                and abs(center[2] - c[2]) < (size[2] + s[2]) / 2.0 + 0.5
                for c, s in placed
            )
            if not clash:
                placed.append((center, size))
                break
        else:
            raise ConfigError("could not place non-overlapping objects; lower n_objects")
    return placed


def generate_scene(config: SceneConfig, seed: int, sequence: int = 0) -> list[Frame]:
    """Render one deterministic sequence of ``config.n_frames`` frames over a static world."""
    rng = np.random.default_rng(seed)
    intrinsics = CameraIntrinsics.from_fov(config.width, config.height, config.hfov_deg)
    travel = config.ego_speed * (config.n_frames - 1)
    poses = [Pose(np.eye(3), np.array([config.ego_lateral * k, 0.0, config.ego_speed * k]))
             for k in range(config.n_frames)]

    for _attempt in range(100):
        layout = _sample_layout(rng, config, intrinsics, travel)
        renders = []
        for pose in poses:
            boxes = [BBox3D(pose.apply_inverse(c[None])[0], s) for c, s in layout]
            depth, owner, axis = raycast(boxes, intrinsics, pose, config.camera_height)
            visible = [np.flatnonzero((owner == k + 1).ravel() & (depth.ravel() <= config.d_max))
                       for k in range(len(boxes))]
            if any(len(v) == 0 for v in visible):
                break
            renders.append((boxes, depth, owner, axis, visible))
        else:
            break
    else:
        raise ConfigError("could not generate a layout with every object visible in every frame")

    colors = rng.uniform(0.15, 0.95, size=(len(layout), 3))
    rcs = rng.uniform(0.0, 20.0, size=len(layout))
    rays = intrinsics.pixel_rays()
    flat_rays = rays.reshape(-1, 3)
    h, w = config.height, config.width

    frames = []
    for k, (pose, (boxes, depth, owner, axis, visible)) in enumerate(zip(poses, renders)):
        mask = rng.random((h, w)) < config.lidar_density
        for vis in visible:
            mask.flat[vis[rng.integers(len(vis))]] = True
        lidar = np.where(mask & (depth <= config.d_max), depth, 0.0)
        for box in boxes:
            box.corners2d = box.project_corners(intrinsics)

        ego_v = np.array([config.ego_lateral, config.ego_speed]) * config.frame_rate
        points = []
        for b, (box, vis) in enumerate(zip(boxes, visible)):
            for _ in range(rng.integers(1, config.max_radar_per_object + 1)):
                ray = flat_rays[vis[rng.integers(len(vis))]]
                t_in, t_out, _ = box.ray_interval(ray[None])
                s = t_in[0] + rng.uniform(0.02, 0.3) * min(t_out[0] - t_in[0], 1.0)
                vel = -ego_v + rng.normal(0.0, 0.1, size=2)
                points.append(RadarPoint(ray * s, vel[0], vel[1], rcs[b] + rng.normal(0.0, 1.0)))
        n_ghost = int(round(config.ghost_rate * len(points)))
        for _ in range(n_ghost):
            u, v = rng.integers(w), rng.integers(h)
            d = rng.uniform(1.0, config.d_max)
            vel = rng.normal(0.0, 3.0, size=2)
            points.append(RadarPoint(intrinsics.backproject(u, v, d), vel[0], vel[1],
                                     rng.uniform(-10.0, 5.0), is_ghost=True))

        image = _render_image(rng, depth, owner, axis, rays, pose, colors, config)
        frames.append(Frame(image, points, lidar, boxes, intrinsics, pose, sequence, k))
    return frames


def generate_dataset(config: SceneConfig, seed: int, n_sequences: int = 1) -> list[Frame]:
    """Concatenate ``n_sequences`` independent sequences with seeds spawned from ``seed``."""
    if n_sequences < 1:
        raise ConfigError("n_sequences must be at least 1")
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    frames = []
    for s, child in enumerate(children):
        frames.extend(generate_scene(config, int(child.generate_state(1)[0]), sequence=s))
    return frames


# --------------------------------------------------------------------------- ground truth

def lidar_points(frame: Frame) -> np.ndarray:
    """Back-project the valid lidar pixels of a frame into its camera coordinates."""
    rows, cols = np.nonzero(frame.lidar_depth > 0)
    return frame.intrinsics.backproject(cols, rows, frame.lidar_depth[rows, cols])


def accumulate_depth(frames: Sequence[Frame], index: int, window: int, densify: bool = True) -> np.ndarray:
    """Merge lidar from frames ``[index - window, index + window]`` into frame ``index``.

    Nearest depth wins each pixel; equal depths go to the later frame. The window is
    clipped to the sequence.
    """
    if not 0 <= index < len(frames):
        raise DataError(f"frame index {index} outside sequence of length {len(frames)}")
    if window < 0:
        raise ConfigError("window must be non-negative")
    target = frames[index]
    h, w = target.shape
    depths, order, flat = [], [], []
    for k in range(max(0, index - window), min(len(frames), index + window + 1)):
        if k == index:
            rows, cols = np.nonzero(target.lidar_depth > 0)
            z = target.lidar_depth[rows, cols]
        else:
            pts = target.pose.apply_inverse(frames[k].pose.apply(lidar_points(frames[k])))
            proj = project_points(pts, target.intrinsics)
            rows, cols, z = proj.rows, proj.cols, proj.depth
        depths.append(z)
        order.append(np.full(len(z), k))
        flat.append(rows * w + cols)
    depths, order, flat = (np.concatenate(a) for a in (depths, order, flat))

    out = np.zeros(h * w)
    if len(flat):
        sort = np.lexsort((-order, depths, flat))
        first = np.ones(len(sort), dtype=bool)
        first[1:] = flat[sort][1:] != flat[sort][:-1]
        winners = sort[first]
        out[flat[winners]] = depths[winners]
    out = out.reshape(h, w)
    return densify_depth(out) if densify else out


def densify_depth(sparse: np.ndarray) -> np.ndarray:
    """Fill each invalid pixel with the depth of its nearest valid pixel.

    Distance is Euclidean in pixel units; ties go to the valid pixel earliest in
    row-major order.
    """
    sparse = np.asarray(sparse, dtype=np.float64)
    valid = np.flatnonzero(sparse.ravel() > 0)
    if len(valid) == 0:
        raise DataError("no depth support")
    h, w = sparse.shape
    out = sparse.copy()
    holes = np.flatnonzero(sparse.ravel() <= 0)
    if len(holes) == 0:
        return out
    vcoords = np.stack(np.divmod(valid, w), axis=1)
    hcoords = np.stack(np.divmod(holes, w), axis=1)
    tree = cKDTree(vcoords)
    dist, _ = tree.query(hcoords, k=1)
    candidates = tree.query_ball_point(hcoords, r=dist + 1e-6)
    flat_out = out.ravel()
    for i, cand in enumerate(candidates):
        cand = np.asarray(cand)
        d2 = ((vcoords[cand] - hcoords[i]) ** 2).sum(axis=1)
        best = cand[d2 == d2.min()].min()
        flat_out[holes[i]] = sparse.flat[valid[best]]
    return out
