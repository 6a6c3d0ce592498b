"""Receding-horizon next-best-view planner: an RRT over (x, y, z, yaw) whose
nodes accumulate distance-discounted unknown-voxel visibility across every
rig camera. Only the first edge of the best branch is executed."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from multicam_nbv import _kernels
from multicam_nbv.mapping import MapSnapshot
from multicam_nbv.sensor import Pose, Rig, camera_pose, wrap_angle


class PlanningStuck(RuntimeError):
    """No collision-free sample could be drawn."""


@dataclass(frozen=True)
class PlannerParams:
    tree_size: int = 60
    max_tree_size: int = 300
    edge_length: float = 1.0
    yaw_weight: float = 0.25
    decay: float = 0.5
    gain_range: Optional[float] = None  # None: camera max_range
    gain_stride: int = 2
    robot_radius: float = 0.5
    zero_gain: float = 1.0
    alpha: float = 0.0
    class_weights: Optional[tuple[float, ...]] = None
    max_attempts: int = 10_000

    def __post_init__(self):
        if self.tree_size < 1 or self.max_tree_size < self.tree_size:
            raise ValueError("need 1 <= tree_size <= max_tree_size")
        if self.gain_stride < 1:
            raise ValueError("gain_stride must be >= 1")
        for name in ("edge_length", "robot_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.decay < 0 or self.yaw_weight < 0 or self.alpha < 0:
            raise ValueError("decay, yaw_weight and alpha must be non-negative")


@dataclass
class PlanNode:
    pose: Pose
    parent: Optional[int]
    edge_cost: float
    path_cost: float
    marginal: float
    gain: float


@dataclass
class RrtTree:
    nodes: list[PlanNode] = field(default_factory=list)

    @classmethod
    def rooted(cls, pose: Pose) -> "RrtTree":
        return cls([PlanNode(pose, None, 0.0, 0.0, 0.0, 0.0)])

    def __len__(self):
        return len(self.nodes)

    def positions(self) -> np.ndarray:
        return np.array([n.pose.position for n in self.nodes])

    def best(self) -> int:
        gains = [n.gain for n in self.nodes]
        return int(np.argmax(gains))

    def path_to(self, i: int) -> list[int]:
        path = [i]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path[::-1]


@dataclass
class PlanResult:
    pose: Pose
    best_gain: float
    tree_size: int
    recovery: bool
    tree: RrtTree


def is_collision_free(snap: MapSnapshot, pose: Pose | np.ndarray, radius: float) -> bool:
    """No OCCUPIED voxel center within ``radius``; unknown space is free."""
    p = np.asarray(pose.position if isinstance(pose, Pose) else pose, dtype=float)
    if not snap.in_bounds(p):
        return False
    res = snap.resolution
    lo = np.floor((p - radius - snap.origin) / res).astype(np.int64) - snap.kmin
    hi = np.floor((p + radius - snap.origin) / res).astype(np.int64) - snap.kmin
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(snap.state.shape) - 1)
    if np.any(hi < lo):
        return True
    block = snap.state[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    occ = np.argwhere(block == _kernels.OCCUPIED)
    if not len(occ):
        return True
    centers = snap.origin + (occ + lo + snap.kmin + 0.5) * res
    return bool(np.all(np.linalg.norm(centers - p, axis=1) > radius))


def _rig_arrays(pose: Pose, rig: Rig):
    origins, rots, intr, mins = [], [], [], []
    for m in rig.mounts:
        cam = camera_pose(pose, m)
        i = m.intrinsics
        origins.append(cam.origin)
        rots.append(cam.rotation)
        intr.append((i.width, i.height, i.fx, i.fy, i.cx, i.cy))
        mins.append(i.min_range)
    return (np.array(origins), np.ascontiguousarray(np.array(rots)), np.array(intr, dtype=float),
            np.array(mins, dtype=float))


def gain_range(rig: Rig, params: PlannerParams) -> float:
    if params.gain_range is not None:
        return float(params.gain_range)
    return max(m.intrinsics.max_range for m in rig.mounts)


def unknown_visible(snap: MapSnapshot, pose: Pose, rig: Rig, params: PlannerParams) -> float:
    origins, rots, intr, mins = _rig_arrays(pose, rig)
    return float(_kernels.unknown_visible(
        snap.state, snap.weight, origins, rots, intr, mins, gain_range(rig, params),
        int(params.gain_stride), snap.resolution, snap.origin, snap.kmin, float(params.alpha),
    ))


def _segment_free(snap, a, b, radius) -> bool:
    # the start is either a validated node or where the vehicle already is
    return all(is_collision_free(snap, p, radius) for p in (0.5 * (a + b), b))


def _sample_pose(rng: np.random.Generator, bounds) -> Pose:
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    pos = rng.uniform(lo, hi)
    yaw = rng.uniform(-math.pi, math.pi)
    return Pose(tuple(pos), yaw)


def expand_tree(tree: RrtTree, snap: MapSnapshot, rig: Rig, params: PlannerParams, bounds,
                rng: np.random.Generator) -> bool:
    """One RRT extension attempt. Returns True if a node was added."""
    sample = _sample_pose(rng, bounds)
    target = sample.xyz
    pos = tree.positions()
    near = int(np.argmin(np.linalg.norm(pos - target, axis=1)))
    parent = tree.nodes[near]
    start = parent.pose.xyz
    delta = target - start
    dist = float(np.linalg.norm(delta))
    if dist > params.edge_length:
        target = start + delta * (params.edge_length / dist)
        dist = params.edge_length
    if not _segment_free(snap, start, target, params.robot_radius):
        return False
    pose = Pose(tuple(target), sample.yaw)
    edge = dist + params.yaw_weight * abs(wrap_angle(pose.yaw - parent.pose.yaw))
    path_cost = parent.path_cost + edge
    marginal = unknown_visible(snap, pose, rig, params)
    gain = parent.gain + marginal * math.exp(-params.decay * path_cost)
    tree.nodes.append(PlanNode(pose, near, edge, path_cost, marginal, gain))
    return True


def _grow(tree, snap, rig, params, bounds, rng, size):
    fails = 0
    while len(tree) < size:
        if expand_tree(tree, snap, rig, params, bounds, rng):
            fails = 0
        else:
            fails += 1
            if fails >= params.max_attempts:
                raise PlanningStuck(f"no collision-free extension in {fails} attempts")


def _recovery(snap, current: Pose, params, bounds, rng) -> Pose:
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    r = 2 * params.edge_length
    c = current.xyz
    for _ in range(params.max_attempts):
        off = rng.uniform(-r, r, size=3)
        yaw = rng.uniform(-math.pi, math.pi)
        if np.linalg.norm(off) > r:
            continue
        p = c + off
        if np.any(p < lo) or np.any(p > hi):
            continue
        if is_collision_free(snap, p, params.robot_radius):
            return Pose(tuple(p), yaw)
    raise PlanningStuck("recovery found no collision-free pose near the current one")


def plan_next(snap: MapSnapshot, current: Pose, rig: Rig, params: PlannerParams, bounds,
              rng: np.random.Generator) -> PlanResult:
    tree = RrtTree.rooted(current)
    _grow(tree, snap, rig, params, bounds, rng, params.tree_size)
    if tree.nodes[tree.best()].gain < params.zero_gain:
        _grow(tree, snap, rig, params, bounds, rng, params.max_tree_size)
    best = tree.best()
    best_gain = tree.nodes[best].gain
    if best_gain < params.zero_gain or best == 0:
        return PlanResult(_recovery(snap, current, params, bounds, rng), best_gain, len(tree), True, tree)
    first = tree.path_to(best)[1]
    return PlanResult(tree.nodes[first].pose, best_gain, len(tree), False, tree)


def act(current: Pose, target: Pose) -> Pose:
    """Kinematic teleport."""
    return Pose(target.position, target.yaw)
