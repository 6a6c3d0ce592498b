"""Multi-camera rig: pinhole depth and semantic rendering against a Scene and
back-projection into semantically labeled point clouds.

Camera frame convention: +z optical axis, +x image right, +y image down.
Mount rotations map camera-frame vectors into the body frame (x forward,
y left, z up).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from multicam_nbv.scene import Scene, ray_cast_many

MOUNT_ORDER = ("front", "left", "right", "back", "bottom")


def wrap_angle(a: float) -> float:
    """Normalize to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 160
    height: int = 120
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 80.0
    cy: float = 60.0
    min_range: float = 0.3
    max_range: float = 8.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not (0 <= self.min_range < self.max_range):
            raise ValueError("need 0 <= min_range < max_range")

    def pixel_rays(self) -> np.ndarray:
        """Unnormalized camera-frame directions (H, W, 3) with unit z."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


@dataclass(frozen=True, eq=False)
class CameraMount:
    name: str
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"mount {self.name!r}: rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError(f"mount {self.name!r}: rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class Rig:
    mounts: tuple[CameraMount, ...]

    def __post_init__(self):
        mounts = tuple(self.mounts)
        object.__setattr__(self, "mounts", mounts)
        if not 1 <= len(mounts) <= 5:
            raise ValueError(f"a rig holds 1 to 5 cameras, got {len(mounts)}")
        names = [m.name for m in mounts]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate mount names {names}")

    @property
    def M(self) -> int:
        return len(self.mounts)

    def __len__(self):
        return len(self.mounts)


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        p = tuple(float(v) for v in self.position)
        if len(p) != 3 or not all(math.isfinite(v) for v in p) or not math.isfinite(self.yaw):
            raise ValueError(f"pose must be finite, got {self.position}, {self.yaw}")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def xyz(self) -> np.ndarray:
        return np.array(self.position)


@dataclass(frozen=True, eq=False)
class CameraTransform:
    """World-from-camera rotation and camera origin in world."""

    rotation: np.ndarray
    origin: np.ndarray


def _horizontal(heading: float) -> np.ndarray:
    z = np.array([math.cos(heading), math.sin(heading), 0.0])
    x = np.array([math.sin(heading), -math.cos(heading), 0.0])
    y = np.array([0.0, 0.0, -1.0])
    return np.column_stack([x, y, z])


def _mount(name: str, intr: CameraIntrinsics, offset: float = 0.1) -> CameraMount:
    if name == "bottom":
        R = np.column_stack([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
        return CameraMount(name, R, np.array([0.0, 0.0, -offset / 2]), intr)
    heading = {"front": 0.0, "left": math.pi / 2, "right": -math.pi / 2, "back": math.pi}[name]
    R = _horizontal(heading)
    R[np.abs(R) < 1e-15] = 0.0
    t = offset * R[:, 2]
    return CameraMount(name, R, t, intr)


PRESETS = {1: ("front",), 2: ("front", "left"), 3: ("front", "left", "right"),
           4: ("front", "left", "right", "back"), 5: MOUNT_ORDER}


def default_rig(M: int = 5, intrinsics: Optional[CameraIntrinsics] = None) -> Rig:
    """Front-first presets: 1 -> front, 3 -> front/left/right, 5 -> all."""
    if M not in PRESETS:
        raise ValueError(f"M must be in 1..5, got {M}")
    intr = intrinsics or CameraIntrinsics()
    return Rig(tuple(_mount(n, intr) for n in PRESETS[M]))


def rig_from_list(data: list) -> Rig:
    if not isinstance(data, list):
        raise ValueError("rig JSON must be a list of mounts")
    mounts = []
    for i, m in enumerate(data):
        extra = set(m) - {"name", "translation", "rotation", "intrinsics"}
        if extra:
            raise ValueError(f"mount {i}: unknown keys {sorted(extra)}")
        q = np.asarray(m["rotation"], dtype=float)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1) > 1e-6:
            raise ValueError(f"mount {i}: rotation must be a unit quaternion [w,x,y,z]")
        R = Rotation.from_quat(q, scalar_first=True).as_matrix()
        mounts.append(CameraMount(m["name"], R, m["translation"], CameraIntrinsics(**m.get("intrinsics", {}))))
    return Rig(tuple(mounts))


def rig_to_list(rig: Rig) -> list:
    out = []
    for m in rig.mounts:
        q = Rotation.from_matrix(m.rotation).as_quat(scalar_first=True)
        i = m.intrinsics
        out.append({
            "name": m.name,
            "translation": [float(v) for v in m.translation],
            "rotation": [float(v) for v in q],
            "intrinsics": {"width": i.width, "height": i.height, "fx": i.fx, "fy": i.fy, "cx": i.cx,
                           "cy": i.cy, "min_range": i.min_range, "max_range": i.max_range},
        })
    return out


def load_rig(path) -> Rig:
    return rig_from_list(json.loads(Path(path).read_text()))


def save_rig(rig: Rig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_list(rig), indent=2) + "\n")


def camera_pose(body: Pose, mount: CameraMount) -> CameraTransform:
    Rz = rot_z(body.yaw)
    return CameraTransform(Rz @ mount.rotation, body.xyz + Rz @ mount.translation)


@dataclass(frozen=True, eq=False)
class DepthImage:
    z: np.ndarray  # (H, W) camera-frame depth, 0 = no return

    @property
    def width(self) -> int:
        return self.z.shape[1]

    @property
    def height(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True, eq=False)
class SemanticImage:
    p: np.ndarray  # (H, W, K) per-pixel class distribution

    @property
    def width(self) -> int:
        return self.p.shape[1]

    @property
    def height(self) -> int:
        return self.p.shape[0]


def _cast_pixels(scene: Scene, cam: CameraTransform, intr: CameraIntrinsics):
    rays = intr.pixel_rays().reshape(-1, 3)
    norms = np.linalg.norm(rays, axis=1)
    dirs_cam = rays / norms[:, None]
    dirs = dirs_cam @ cam.rotation.T
    # cap ray length so the z-depth cap equals max_range
    max_t = intr.max_range / dirs_cam[:, 2]
    origins = np.broadcast_to(cam.origin, dirs.shape)
    t, cls = ray_cast_many(scene, origins, dirs, max_t)
    z = np.where(cls >= 0, t * dirs_cam[:, 2], 0.0)
    return z.reshape(intr.height, intr.width), cls.reshape(intr.height, intr.width)


def render_depth(scene: Scene, cam: CameraTransform, intr: CameraIntrinsics,
                 noise_sigma: float = 0.0, rng: Optional[np.random.Generator] = None) -> DepthImage:
    z, _ = _cast_pixels(scene, cam, intr)
    return DepthImage(_finish_depth(z, intr, noise_sigma, rng))


def _finish_depth(z, intr, noise_sigma, rng):
    z = z.copy()
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("depth noise needs an rng")
        hit = z > 0
        z[hit] *= 1.0 + noise_sigma * rng.standard_normal(int(hit.sum()))
    z[(z < intr.min_range) | (z > intr.max_range)] = 0.0
    return z


def class_distribution(class_ids: np.ndarray, K: int, confusion: float) -> np.ndarray:
    """Per-pixel distributions: 1-eps on the true class, eps/(K-1) elsewhere,
    uniform where ``class_ids`` < 0."""
    if not 0 <= confusion < 1:
        raise ValueError(f"confusion must be in [0, 1), got {confusion}")
    ids = np.asarray(class_ids)
    if K == 1:
        return np.ones(ids.shape + (1,))
    out = np.full(ids.shape + (K,), confusion / (K - 1))
    hit = ids >= 0
    out[hit, ids[hit]] = 1.0 - confusion
    out[~hit] = 1.0 / K
    return out


def render_semantics(scene: Scene, cam: CameraTransform, intr: CameraIntrinsics,
                     confusion: float = 0.0) -> SemanticImage:
    z, cls = _cast_pixels(scene, cam, intr)
    z = _finish_depth(z, intr, 0.0, None)
    cls = np.where(z > 0, cls, -1)
    return SemanticImage(class_distribution(cls, scene.classes.K, confusion))


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """Hit points with class distributions, plus no-hit carving endpoints."""

    origin: np.ndarray
    points: np.ndarray  # (N, 3)
    classes: np.ndarray  # (N, K)
    free_ends: np.ndarray  # (F, 3)
    degenerate: bool = False

    def __len__(self):
        return len(self.points)


def cloud_from_images(depth: DepthImage, sem: SemanticImage, intr: CameraIntrinsics,
                      cam: CameraTransform, stride: int = 1) -> LabeledCloud:
    if depth.z.shape != sem.p.shape[:2]:
        raise ValueError(f"depth {depth.z.shape} and semantic {sem.p.shape[:2]} images differ in size")
    if depth.z.shape != (intr.height, intr.width):
        raise ValueError("image size does not match intrinsics")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    z = depth.z[::stride, ::stride]
    p = sem.p[::stride, ::stride]
    rays = intr.pixel_rays()[::stride, ::stride]
    hit = z > 0
    pts_cam = rays[hit] * z[hit][:, None]
    free_cam = rays[~hit] * intr.max_range
    return LabeledCloud(
        origin=cam.origin.copy(),
        points=pts_cam @ cam.rotation.T + cam.origin,
        classes=p[hit],
        free_ends=free_cam @ cam.rotation.T + cam.origin,
    )


def sense_all(scene: Scene, body: Pose, rig: Rig, confusion: float = 0.0, stride: int = 1,
              rng: Optional[np.random.Generator] = None, noise_sigma: float = 0.0) -> list[LabeledCloud]:
    """One cloud per mount, in mount order.

    A camera whose origin sits inside a box renders all-zero depth; its cloud
    is flagged degenerate and carries no carving rays.
    """
    clouds = []
    for mount in rig.mounts:
        cam = camera_pose(body, mount)
        intr = mount.intrinsics
        z, cls = _cast_pixels(scene, cam, intr)
        z = _finish_depth(z, intr, noise_sigma, rng)
        sem = SemanticImage(class_distribution(np.where(z > 0, cls, -1), scene.classes.K, confusion))
        cloud = cloud_from_images(DepthImage(z), sem, intr, cam, stride)
        if scene.inside_any(cam.origin) is not None:
            cloud = LabeledCloud(cloud.origin, cloud.points, cloud.classes, np.empty((0, 3)), degenerate=True)
        clouds.append(cloud)
    return clouds


def write_pgm(depth: DepthImage, path) -> None:
    """16-bit binary PGM in millimeters, 0 = no return."""
    mm = np.rint(depth.z * 1000.0)
    if mm.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit millimeter range")
    data = mm.astype(">u2")
    header = f"P5\n{depth.width} {depth.height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> DepthImage:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    data = np.frombuffer(parts[3], dtype=">u2").reshape(h, w)
    return DepthImage(data.astype(float) / 1000.0)
