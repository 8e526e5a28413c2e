"""Deterministic synthetic world generation and analytic oracle labels.

Worlds are collections of simple primitives (ground plane, boxes, ellipsoids,
poles, walls, constant-velocity movers). Labels are produced by exact
first-hit ray casting; depth is camera-frame z.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .geometry import Camera, CameraRig, apply_rigid, default_rig, inv_rigid, rot_z, rt_to_mat
from .voxel import FREE, GridSpec, VoxelGrid

SKY = -1  # semantic sentinel for no-hit pixels

CLASS_NAMES = ("ground", "box", "mover", "pole", "ellipsoid", "wall")
CLASS_GROUND, CLASS_BOX, CLASS_MOVER, CLASS_POLE, CLASS_ELLIPSOID, CLASS_WALL = range(6)

GROUND_THICKNESS = 0.4


@dataclass
class Primitive:
    kind: str                    # ground-plane | box | ellipsoid | vertical-pole
    pose: np.ndarray             # world-from-local 4x4
    half_extents: np.ndarray     # meters
    class_id: int
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 0.5]))

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.kind != "ground-plane" and np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")

    def pose_at(self, t):
        M = self.pose.copy()
        M[:3, 3] += self.velocity * t
        return M

    def to_dict(self):
        return {"kind": self.kind, "pose": self.pose.tolist(),
                "half_extents": self.half_extents.tolist(),
                "class_id": int(self.class_id),
                "velocity": self.velocity.tolist(), "albedo": self.albedo.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.asarray(d["pose"]), np.asarray(d["half_extents"]),
                   int(d["class_id"]), np.asarray(d["velocity"]), np.asarray(d["albedo"]))


@dataclass
class EgoPose:
    index: int
    ego_from_world: np.ndarray
    timestamp: float

    @property
    def world_from_ego(self):
        return inv_rigid(self.ego_from_world)


@dataclass
class FrameRecord:
    images: np.ndarray      # (L, H, W, 3) float32 in [0,1]
    depth: np.ndarray       # (L, H, W) float64 meters, 0 where sky
    sem: np.ndarray         # (L, H, W) int32, SKY where no hit
    pose: EgoPose


@dataclass
class SceneConfig:
    class_count: int = 6
    extents: tuple = ((-8.0, 8.0), (-8.0, 8.0), (-0.4, 2.8))
    n_boxes: int = 4
    n_movers: int = 1
    n_poles: int = 2
    n_ellipsoids: int = 2
    n_walls: int = 1
    mover_speed: tuple = (1.0, 2.5)
    box_size: tuple = (0.6, 1.6)
    keepout_radius: float = 2.5   # no primitives on top of the ego start


@dataclass
class TrajectoryConfig:
    n_frames: int = 12
    dt: float = 0.5
    speed: float = 2.0
    yaw_rate: float = 0.0   # rad/s
    start: tuple = (0.0, 0.0)


def generate_world(seed, config: SceneConfig):
    """Deterministic primitive soup inside the configured extents."""
    ext = np.asarray(config.extents, dtype=np.float64)
    if np.any(ext[:, 1] <= ext[:, 0]):
        raise ValueError("extents must be non-empty intervals")
    rng = np.random.default_rng(seed)
    world = [Primitive("ground-plane", np.eye(4), np.array([1e9, 1e9, GROUND_THICKNESS / 2]),
                       CLASS_GROUND, albedo=np.array([0.35, 0.4, 0.35]))]

    def place(margin_z):
        for _ in range(64):
            x = rng.uniform(ext[0, 0], ext[0, 1])
            y = rng.uniform(ext[1, 0], ext[1, 1])
            if np.hypot(x, y) >= config.keepout_radius:
                return np.array([x, y, margin_z])
        return np.array([ext[0, 1] * 0.8, ext[1, 1] * 0.8, margin_z])

    for _ in range(config.n_boxes):
        he = rng.uniform(config.box_size[0], config.box_size[1], 3)
        he[2] = min(he[2], (ext[2, 1] - 0.2) / 2)
        pos = place(he[2])
        yaw = rng.uniform(0, 2 * np.pi)
        world.append(Primitive("box", rt_to_mat(rot_z(yaw), pos), he, CLASS_BOX,
                               albedo=rng.uniform(0.3, 0.9, 3)))
    for _ in range(config.n_movers):
        he = rng.uniform(0.5, 1.0, 3)
        pos = place(he[2])
        speed = rng.uniform(*config.mover_speed)
        heading = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
        world.append(Primitive("box", rt_to_mat(np.eye(3), pos), he, CLASS_MOVER,
                               velocity=vel, albedo=rng.uniform(0.3, 0.9, 3)))
    for _ in range(config.n_poles):
        h = rng.uniform(1.0, ext[2, 1] - 0.1)
        pos = place(h / 2)
        world.append(Primitive("vertical-pole", rt_to_mat(np.eye(3), pos),
                               np.array([0.15, 0.15, h / 2]), CLASS_POLE,
                               albedo=rng.uniform(0.4, 0.8, 3)))
    for _ in range(config.n_ellipsoids):
        he = rng.uniform(0.5, 1.2, 3)
        pos = place(he[2] * 0.8)
        world.append(Primitive("ellipsoid", rt_to_mat(np.eye(3), pos), he,
                               CLASS_ELLIPSOID, albedo=rng.uniform(0.3, 0.9, 3)))
    for _ in range(config.n_walls):
        side = rng.integers(0, 4)
        yaw = side * np.pi / 2
        dist = 0.85 * (ext[0, 1] if side % 2 == 0 else ext[1, 1])
        pos = rot_z(yaw) @ np.array([dist, 0.0, 0.0])
        he = np.array([0.2, rng.uniform(3.0, 6.0), rng.uniform(1.0, ext[2, 1] - 0.2) / 1])
        he[2] = min(he[2], ext[2, 1] - 0.2)
        pos[2] = he[2] / 2
        world.append(Primitive("box", rt_to_mat(rot_z(yaw), pos), he, CLASS_WALL,
                               albedo=rng.uniform(0.4, 0.7, 3)))
    return world


def sample_trajectory(seed, config: TrajectoryConfig, horizon=0):
    """Smooth constant-speed ego trajectory; returns list of EgoPose."""
    if config.n_frames < 2 * horizon + 1:
        raise ValueError(f"need at least {2 * horizon + 1} frames for horizon {horizon}")
    poses = []
    pos = np.array([config.start[0], config.start[1], 0.0])
    yaw = 0.0
    for i in range(config.n_frames):
        world_from_ego = rt_to_mat(rot_z(yaw), pos)
        poses.append(EgoPose(i, inv_rigid(world_from_ego), i * config.dt))
        step_yaw = config.yaw_rate * config.dt
        heading = yaw + step_yaw / 2
        pos = pos + config.speed * config.dt * np.array([np.cos(heading), np.sin(heading), 0.0])
        yaw += step_yaw
    return poses


# ------------------------------------------------------------- ray casting

def _intersect(prim: Primitive, origins, dirs, t, near=1e-4):
    """Ray parameters of first hits for one primitive; inf where missed.

    origins: (3,) world; dirs: (P, 3) world; t: scene time (seconds).
    """
    M = prim.pose_at(t)
    Rl = M[:3, :3].T
    o = Rl @ (origins - M[:3, 3])
    d = dirs @ Rl.T
    P = dirs.shape[0]
    hit = np.full(P, np.inf)
    if prim.kind == "ground-plane":
        dz = d[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = -o[2] / dz
        ok = (dz != 0) & (tt > near)
        hit[ok] = tt[ok]
    elif prim.kind == "box":
        he = prim.half_extents
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-he - o) * inv
            t2 = (he - o) * inv
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        ok = (tmax >= tmin) & (tmin > near)
        hit[ok] = tmin[ok]
    elif prim.kind == "ellipsoid":
        he = prim.half_extents
        q = o / he
        r = d / he
        a = np.sum(r * r, axis=1)
        b = 2 * np.sum(q * r, axis=1)
        c = np.sum(q * q) - 1.0
        disc = b * b - 4 * a * c
        ok = disc >= 0
        tt = np.full(P, np.inf)
        sq = np.sqrt(np.maximum(disc, 0.0))
        tt[ok] = (-b[ok] - sq[ok]) / (2 * a[ok])
        ok &= tt > near
        hit[ok] = tt[ok]
    elif prim.kind == "vertical-pole":
        r0, hz = prim.half_extents[0], prim.half_extents[2]
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2 * (o[0] * d[:, 0] + o[1] * d[:, 1])
        c = o[0] ** 2 + o[1] ** 2 - r0 * r0
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.maximum(disc, 0.0))
        tt = np.full(P, np.inf)
        tt[ok] = (-b[ok] - sq[ok]) / (2 * a[ok])
        z = o[2] + tt * d[:, 2]
        ok &= (tt > near) & (np.abs(z) <= hz)
        hit[ok] = tt[ok]
    else:
        raise ValueError(f"unknown primitive kind {prim.kind}")
    return hit


def _camera_rays(cam: Camera, world_from_ego):
    """World-space origin and directions with unit camera-z component."""
    ego_from_cam = cam.ego_from_cam
    world_from_cam = world_from_ego @ ego_from_cam
    jj, ii = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    x = (jj + 0.5 - cam.cx) / cam.fx
    y = (ii + 0.5 - cam.cy) / cam.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ world_from_cam[:3, :3].T
    origin = world_from_cam[:3, 3]
    return origin, dirs


def render_labels(world, rig: CameraRig, pose: EgoPose, t=None):
    """Exact per-pixel first-hit labels for every camera of the rig."""
    if t is None:
        t = pose.timestamp
    world_from_ego = pose.world_from_ego
    L = len(rig)
    H, W = rig[0].height, rig[0].width
    images = np.zeros((L, H, W, 3), dtype=np.float32)
    depth = np.zeros((L, H, W), dtype=np.float64)
    sem = np.full((L, H, W), SKY, dtype=np.int32)
    sky_color = np.array([0.7, 0.8, 1.0], dtype=np.float32)
    for li, cam in enumerate(rig):
        origin, dirs = _camera_rays(cam, world_from_ego)
        best = np.full(dirs.shape[0], np.inf)
        cls = np.full(dirs.shape[0], SKY, dtype=np.int32)
        alb = np.zeros((dirs.shape[0], 3))
        for prim in world:
            tt = _intersect(prim, origin, dirs, t)
            closer = tt < best
            best[closer] = tt[closer]
            cls[closer] = prim.class_id
            alb[closer] = prim.albedo
        hit = np.isfinite(best)
        img = np.broadcast_to(sky_color, (dirs.shape[0], 3)).copy()
        shade = 1.0 / (1.0 + 0.03 * np.where(hit, best, 0.0))
        img[hit] = alb[hit] * shade[hit, None]
        images[li] = img.reshape(H, W, 3).astype(np.float32)
        depth[li] = np.where(hit, best, 0.0).reshape(H, W)
        sem[li] = cls.reshape(H, W)
    return FrameRecord(images=images, depth=depth, sem=sem, pose=pose)


def world_occupancy(world, spec: GridSpec, pose: EgoPose, t=None, class_count=6):
    """Oracle semantic occupancy grid in the ego frame of the given pose."""
    if t is None:
        t = pose.timestamp
    centers_ego = spec.centers()
    centers_w = apply_rigid(pose.world_from_ego, centers_ego)
    labels = np.full(spec.n_voxels, FREE, dtype=np.int32)
    for prim in world:
        M = prim.pose_at(t)
        local = (centers_w - M[:3, 3]) @ M[:3, :3]
        he = prim.half_extents
        if prim.kind == "ground-plane":
            inside = (local[:, 2] <= 0.0) & (local[:, 2] >= -GROUND_THICKNESS)
        elif prim.kind == "box":
            inside = np.all(np.abs(local) <= he, axis=1)
        elif prim.kind == "ellipsoid":
            inside = np.sum((local / he) ** 2, axis=1) <= 1.0
        elif prim.kind == "vertical-pole":
            inside = (np.hypot(local[:, 0], local[:, 1]) <= he[0]) & (np.abs(local[:, 2]) <= he[2])
        else:
            continue
        labels[inside] = prim.class_id
    labels = labels.reshape(spec.dims)
    occ = (labels != FREE).astype(np.float64)
    return VoxelGrid(spec, occ, labels, class_count=class_count)


# --------------------------------------------------------------- dataset io

DATASET_VERSION = 1


def _rig_to_meta(rig):
    return [{"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
             "width": c.width, "height": c.height,
             "cam_from_ego": c.cam_from_ego.tolist()} for c in rig]


def _rig_from_meta(meta):
    return CameraRig([Camera(fx=m["fx"], fy=m["fy"], cx=m["cx"], cy=m["cy"],
                             width=m["width"], height=m["height"],
                             cam_from_ego=np.asarray(m["cam_from_ego"]))
                      for m in meta]).validate()


def write_dataset(path, frames, rig, world, config: SceneConfig, dt, write_png=False):
    os.makedirs(path, exist_ok=True)
    meta = {
        "version": DATASET_VERSION,
        "class_count": config.class_count,
        "class_names": list(CLASS_NAMES[:config.class_count]),
        "cameras": _rig_to_meta(rig),
        "L": len(rig), "H": rig[0].height, "W": rig[0].width,
        "dt": dt,
        "extents": [list(e) for e in config.extents],
        "n_frames": len(frames),
        "world": [p.to_dict() for p in world],
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
    for i, fr in enumerate(frames):
        dc.write_arrays(os.path.join(path, f"frame_{i:05d}.bin"), {
            "images": fr.images,
            "depth": fr.depth,
            "sem": fr.sem,
            "ego_from_world": fr.pose.ego_from_world,
            "timestamp": np.array([fr.pose.timestamp]),
        })
        if write_png:
            _write_pngs(path, i, fr)


def _write_pngs(path, i, fr):
    try:
        from PIL import Image
    except ImportError:
        return
    for li in range(fr.images.shape[0]):
        arr = (np.clip(fr.images[li], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(path, f"frame_{i:05d}_cam{li}.png"))


class Dataset:
    """Lazy frame-by-frame reader for a generated sequence directory."""

    def __init__(self, path):
        self.path = path
        meta_path = os.path.join(path, "meta.json")
        if not os.path.exists(meta_path):
            raise FileNotFoundError(f"no dataset at {path}")
        with open(meta_path) as f:
            self.meta = json.load(f)
        if self.meta.get("version") != DATASET_VERSION:
            raise dc.ContainerError(f"unsupported dataset version {self.meta.get('version')}")
        self.rig = _rig_from_meta(self.meta["cameras"])
        self.world = [Primitive.from_dict(d) for d in self.meta["world"]]
        self.class_count = self.meta["class_count"]
        self.dt = self.meta["dt"]
        self.n_frames = self.meta["n_frames"]

    def __len__(self):
        return self.n_frames

    def frame(self, i):
        arrays = dc.read_arrays(os.path.join(self.path, f"frame_{i:05d}.bin"))
        pose = EgoPose(i, arrays["ego_from_world"], float(arrays["timestamp"][0]))
        return FrameRecord(images=arrays["images"], depth=arrays["depth"],
                           sem=arrays["sem"], pose=pose)

    def frames(self):
        return [self.frame(i) for i in range(self.n_frames)]


def load_dataset(path):
    return Dataset(path)


def generate_dataset(path, seed, scene_config=None, traj_config=None, rig=None,
                     write_png=False, workers=None):
    """Generate world + trajectory, render all frames, write the dataset."""
    scene_config = scene_config or SceneConfig()
    traj_config = traj_config or TrajectoryConfig()
    rig = rig or default_rig()
    world = generate_world(seed, scene_config)
    poses = sample_trajectory(seed, traj_config)
    if workers is None:
        workers = int(os.environ.get("SGO_THREADS", "0")) or None
    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as ex:
            frames = list(ex.map(lambda p: render_labels(world, rig, p), poses))
    else:
        frames = [render_labels(world, rig, p) for p in poses]
    write_dataset(path, frames, rig, world, scene_config, traj_config.dt, write_png)
    return Dataset(path)
