"""Ground-truth world: labeled axis-aligned boxes, exact ray casting, JSON
loading and the parametric dry-dock generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from multicam_nbv import _kernels


class SceneError(ValueError):
    """Raised when a scene file or scene object violates its invariants."""


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise SceneError("class table must hold at least one class")
        if any(not isinstance(n, str) or not n for n in names):
            raise SceneError("class names must be non-empty strings")
        if len(set(names)) != len(names):
            raise SceneError(f"duplicate class names in {list(names)}")

    @property
    def K(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SceneError(f"unknown class {name!r}") from None


@dataclass(frozen=True)
class LabeledBox:
    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]
    class_id: int

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if len(lo) != 3 or len(hi) != 3:
            raise SceneError("box corners must be 3-vectors")
        if not all(math.isfinite(v) for v in lo + hi):
            raise SceneError(f"non-finite box corner {lo} / {hi}")
        if any(a >= b for a, b in zip(lo, hi)):
            raise SceneError(f"degenerate box: min {lo} is not strictly below max {hi}")

    def contains(self, p) -> bool:
        return all(lo < v < hi for lo, v, hi in zip(self.min_corner, p, self.max_corner))


@dataclass(frozen=True)
class RayHit:
    t: float
    class_id: int


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable world. ``bounds`` is the exploration volume as (min, max)."""

    boxes: tuple[LabeledBox, ...]
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]]
    classes: ClassTable
    _box_min: np.ndarray = field(init=False, repr=False)
    _box_max: np.ndarray = field(init=False, repr=False)
    _box_cls: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        boxes = tuple(self.boxes)
        lo = tuple(float(v) for v in self.bounds[0])
        hi = tuple(float(v) for v in self.bounds[1])
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "bounds", (lo, hi))
        if any(a >= b for a, b in zip(lo, hi)):
            raise SceneError(f"bounds have no volume: {lo} / {hi}")
        for i, b in enumerate(boxes):
            if not 0 <= b.class_id < self.classes.K:
                raise SceneError(f"box {i}: class id {b.class_id} outside class table")
            if any(b.max_corner[a] < lo[a] or b.min_corner[a] > hi[a] for a in range(3)):
                raise SceneError(f"box {i} does not intersect the scene bounds")
        bmin = np.array([b.min_corner for b in boxes], dtype=float).reshape(-1, 3)
        bmax = np.array([b.max_corner for b in boxes], dtype=float).reshape(-1, 3)
        for arr in (bmin, bmax):
            arr.setflags(write=False)
        object.__setattr__(self, "_box_min", bmin)
        object.__setattr__(self, "_box_max", bmax)
        object.__setattr__(self, "_box_cls", np.array([b.class_id for b in boxes], dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.boxes, self.bounds, self.classes) == (other.boxes, other.bounds, other.classes)

    @property
    def box_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._box_min, self._box_max, self._box_cls

    def inside_any(self, p) -> Optional[int]:
        """Index of the first box strictly containing ``p``."""
        for i, b in enumerate(self.boxes):
            if b.contains(p):
                return i
        return None

    def clearance(self, p) -> float:
        """Distance from ``p`` to the nearest box (0 inside); inf if empty."""
        if not len(self.boxes):
            return math.inf
        p = np.asarray(p, dtype=float)
        gap = np.maximum(np.maximum(self._box_min - p, p - self._box_max), 0.0)
        return float(np.min(np.linalg.norm(gap, axis=1)))

    def translated(self, offset) -> "Scene":
        off = np.asarray(offset, dtype=float)
        boxes = [
            LabeledBox(tuple(np.add(b.min_corner, off)), tuple(np.add(b.max_corner, off)), b.class_id)
            for b in self.boxes
        ]
        return Scene(tuple(boxes), (tuple(np.add(self.bounds[0], off)), tuple(np.add(self.bounds[1], off))), self.classes)


def _check_vec(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be a finite 3-vector, got {v!r}")
    return a


def ray_cast_many(scene: Scene, origins: np.ndarray, dirs: np.ndarray, max_ranges: np.ndarray):
    """Vectorized cast. Returns (t, class id) arrays; misses have t=inf, class -1."""
    bmin, bmax, bcls = scene.box_arrays
    t, idx = _kernels.cast_rays(
        np.ascontiguousarray(origins, dtype=float),
        np.ascontiguousarray(dirs, dtype=float),
        np.ascontiguousarray(max_ranges, dtype=float),
        bmin,
        bmax,
    )
    cls = np.where(idx >= 0, bcls[np.maximum(idx, 0)] if len(bcls) else -1, -1)
    return t, cls


def ray_cast(scene: Scene, origin, direction, max_range: float) -> Optional[RayHit]:
    """Nearest box surface along the ray within ``max_range``.

    An origin strictly inside a box hits that box at t=0.
    """
    o = _check_vec(origin, "origin")
    d = _check_vec(direction, "direction")
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit length, |d|={np.linalg.norm(d)!r}")
    if not (max_range > 0) or math.isnan(max_range):
        raise ValueError(f"max_range must be positive, got {max_range!r}")
    t, cls = ray_cast_many(scene, o[None], d[None], np.array([float(max_range)]))
    if cls[0] < 0:
        return None
    return RayHit(float(t[0]), int(cls[0]))


_TOP_KEYS = {"classes", "bounds", "boxes"}
_BOUNDS_KEYS = {"min", "max"}
_BOX_KEYS = {"min", "max", "class"}


def _reject_unknown(obj: dict, allowed: set, where: str):
    extra = set(obj) - allowed
    if extra:
        raise SceneError(f"{where}: unknown keys {sorted(extra)}")
    missing = allowed - set(obj)
    if missing:
        raise SceneError(f"{where}: missing keys {sorted(missing)}")


def scene_from_dict(data: dict) -> Scene:
    if not isinstance(data, dict):
        raise SceneError("scene JSON must be an object")
    _reject_unknown(data, _TOP_KEYS, "scene")
    classes = ClassTable(tuple(data["classes"]))
    bd = data["bounds"]
    if not isinstance(bd, dict):
        raise SceneError("bounds must be an object")
    _reject_unknown(bd, _BOUNDS_KEYS, "bounds")
    boxes = []
    for i, bx in enumerate(data["boxes"]):
        if not isinstance(bx, dict):
            raise SceneError(f"box {i} must be an object")
        _reject_unknown(bx, _BOX_KEYS, f"box {i}")
        try:
            boxes.append(LabeledBox(tuple(bx["min"]), tuple(bx["max"]), classes.index(bx["class"])))
        except (SceneError, TypeError, ValueError) as exc:
            raise SceneError(f"box {i}: {exc}") from None
    try:
        return Scene(tuple(boxes), (tuple(bd["min"]), tuple(bd["max"])), classes)
    except (TypeError, ValueError) as exc:
        raise SceneError(str(exc)) from None


def scene_to_dict(scene: Scene) -> dict:
    return {
        "classes": list(scene.classes.names),
        "bounds": {"min": list(scene.bounds[0]), "max": list(scene.bounds[1])},
        "boxes": [
            {"min": list(b.min_corner), "max": list(b.max_corner), "class": scene.classes.names[b.class_id]}
            for b in scene.boxes
        ],
    }


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise SceneError(f"cannot read scene file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON ({exc})") from None
    return scene_from_dict(data)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n")


DEFAULT_CLASSES = ClassTable(("floor", "wall", "hull"))


def make_drydock(
    length: float = 20.0,
    width: float = 12.0,
    depth: float = 6.0,
    wall_thickness: float = 0.5,
    classes: ClassTable = DEFAULT_CLASSES,
) -> Scene:
    """U-shaped dock open at x=0 with a hull-proxy box in the basin.

    The floor slab spans the footprint; side walls run along x and the end
    wall closes x=length. The hull rests on the floor, centered in the basin,
    and fills 60% x 40% x 60% of it.
    """
    dims = (length, width, depth, wall_thickness)
    if not all(isinstance(v, (int, float)) and math.isfinite(v) and v > 0 for v in dims):
        raise ValueError(f"dock dimensions must be positive, got {dims}")
    if wall_thickness >= width / 4:
        raise ValueError(f"wall_thickness {wall_thickness} must be below width/4 = {width / 4}")
    if wall_thickness >= depth or wall_thickness >= length / 2:
        raise ValueError("wall_thickness too large for the dock length/depth")
    floor, wall, hull = (classes.index(n) for n in ("floor", "wall", "hull"))
    L, W, D, t = map(float, dims)
    boxes = [
        LabeledBox((0.0, 0.0, 0.0), (L, W, t), floor),
        LabeledBox((0.0, 0.0, t), (L, t, D), wall),
        LabeledBox((0.0, W - t, t), (L, W, D), wall),
        LabeledBox((L - t, t, t), (L, W - t, D), wall),
    ]
    # basin: x in [0, L-t], y in [t, W-t], z in [t, D]
    bx, by, bz = L - t, W - 2 * t, D - t
    cx, cy = bx / 2, W / 2
    hx, hy, hz = 0.6 * bx, 0.4 * by, 0.6 * bz
    boxes.append(LabeledBox((cx - hx / 2, cy - hy / 2, t), (cx + hx / 2, cy + hy / 2, t + hz), hull))
    return Scene(tuple(boxes), ((0.0, 0.0, 0.0), (L, W, D + 1.0)), classes)
