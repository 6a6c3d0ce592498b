"""Semantic-metric voxel map: clamped log-odds occupancy, floored product
fusion of class distributions, cloud integration with free-space carving and
coverage statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from multicam_nbv import _kernels
from multicam_nbv.sensor import LabeledCloud


class VoxelState(IntEnum):
    UNKNOWN = _kernels.UNKNOWN
    FREE = _kernels.FREE
    OCCUPIED = _kernels.OCCUPIED


def logit(p: float) -> float:
    # odds on the decimal value, so 0.7 gives ln(7/3) and not ln(0.7/0.30000000000000004)
    q = Fraction(repr(float(p)))
    return math.log(float(q / (1 - q)))


def sigmoid(l):
    return 1.0 - 1.0 / (1.0 + np.exp(l))


def logodds_update(l: float, p_meas: float, l_min: float = -2.0, l_max: float = 3.5) -> float:
    if not 0.0 < p_meas < 1.0:
        raise ValueError(f"measurement probability must be in (0, 1), got {p_meas}")
    return min(max(l + logit(p_meas), l_min), l_max)


def fuse_semantics(prior, obs, floor: float = 1e-6) -> np.ndarray:
    """Floored elementwise product of two class distributions, renormalized."""
    q = np.maximum(np.asarray(prior, dtype=float), floor) * np.maximum(np.asarray(obs, dtype=float), floor)
    q = q / q.sum()
    return _lift(q, floor)


def _lift(q: np.ndarray, floor: float) -> np.ndarray:
    # pin components below the floor to it and rescale the rest; repeat until stable
    low = q < floor
    while low.any():
        rest = ~low
        q = np.where(low, floor, q * (1.0 - floor * low.sum()) / q[rest].sum())
        new_low = low | (q < floor)
        if (new_low == low).all():
            break
        low = new_low
    return q


@dataclass
class IntegrationReport:
    touched: int
    new: int
    degenerate: int


@dataclass
class CoverageStats:
    occupied: int
    free: int
    unknown: int
    per_class: tuple[int, ...]

    @property
    def total(self) -> int:
        return self.occupied + self.free + self.unknown


@dataclass(frozen=True, eq=False)
class MapSnapshot:
    """Read-only view for planning: per-voxel state and semantic weights."""

    state: np.ndarray
    weight: np.ndarray
    resolution: float
    origin: np.ndarray
    kmin: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]

    def key(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=float) - self.origin) / self.resolution).astype(np.int64)

    def center(self, key) -> np.ndarray:
        return self.origin + (np.asarray(key) + 0.5) * self.resolution

    def in_bounds(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.bounds[0]) and np.all(p <= self.bounds[1]))

    def state_at(self, key) -> VoxelState:
        i = np.asarray(key) - self.kmin
        if np.any(i < 0) or np.any(i >= self.state.shape):
            return VoxelState.UNKNOWN
        return VoxelState(int(self.state[tuple(i)]))


class VoxelMap:
    """Bounded voxel grid; a voxel is 'stored' once it received any update.

    Keys are ``floor((p - origin) / resolution)``. The bounded lattice is every
    key whose cell overlaps ``bounds``.
    """

    def __init__(self, bounds, resolution: float, n_classes: int, origin=(0.0, 0.0, 0.0),
                 p_hit: float = 0.7, p_miss: float = 0.4, l_min: float = -2.0, l_max: float = 3.5,
                 theta: float = 0.15, class_floor: float = 1e-6):
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        if not (0.0 < p_miss < 0.5 < p_hit < 1.0):
            raise ValueError("need 0 < p_miss < 0.5 < p_hit < 1")
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=float)
        self.bounds = (np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float))
        if np.any(self.bounds[0] >= self.bounds[1]):
            raise ValueError("bounds have no volume")
        self.p_hit, self.p_miss = p_hit, p_miss
        self.l_min, self.l_max = l_min, l_max
        self.theta = theta
        self.class_floor = class_floor
        self.K = int(n_classes)
        self.kmin = np.floor((self.bounds[0] - self.origin) / self.resolution).astype(np.int64)
        kmax = np.ceil((self.bounds[1] - self.origin) / self.resolution).astype(np.int64)
        self.shape = tuple(int(v) for v in kmax - self.kmin)
        self.log_odds = np.zeros(self.shape)
        self.stored = np.zeros(self.shape, dtype=bool)
        self.hits = np.zeros(self.shape, dtype=np.int64)
        self.probs = np.full(self.shape + (self.K,), 1.0 / self.K)
        self._stamp = np.full(self.shape, -1, dtype=np.int64)
        self._stamp_id = 0

    # keys ------------------------------------------------------------------
    @property
    def total_voxels(self) -> int:
        return int(np.prod(self.shape))

    def key(self, p) -> tuple[int, int, int]:
        k = np.floor((np.asarray(p, dtype=float) - self.origin) / self.resolution).astype(np.int64)
        return tuple(int(v) for v in k)

    def center(self, key) -> np.ndarray:
        return self.origin + (np.asarray(key, dtype=float) + 0.5) * self.resolution

    def _index(self, key) -> Optional[tuple[int, int, int]]:
        i = np.asarray(key, dtype=np.int64) - self.kmin
        if np.any(i < 0) or np.any(i >= self.shape):
            return None
        return tuple(int(v) for v in i)

    def contains_point(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.bounds[0]) and np.all(p <= self.bounds[1]))

    def __contains__(self, key) -> bool:
        i = self._index(key)
        return i is not None and bool(self.stored[i])

    def __len__(self) -> int:
        return int(self.stored.sum())

    def keys(self) -> list[tuple[int, int, int]]:
        return [tuple(int(v) for v in row) for row in np.argwhere(self.stored) + self.kmin]

    # queries ---------------------------------------------------------------
    def log_odds_at(self, key) -> Optional[float]:
        i = self._index(key)
        if i is None or not self.stored[i]:
            return None
        return float(self.log_odds[i])

    def occupancy(self, key) -> Optional[float]:
        l = self.log_odds_at(key)
        return None if l is None else float(sigmoid(l))

    def state(self, key) -> VoxelState:
        p = self.occupancy(key)
        if p is None:
            return VoxelState.UNKNOWN
        return self._classify_p(p)

    def _classify_p(self, p: float) -> VoxelState:
        if p > 0.5 + self.theta:
            return VoxelState.OCCUPIED
        if p < 0.5 - self.theta:
            return VoxelState.FREE
        return VoxelState.UNKNOWN

    def class_distribution(self, key) -> np.ndarray:
        i = self._index(key)
        if i is None or not self.stored[i]:
            raise KeyError(f"voxel {tuple(key)} is not in the map")
        return self.probs[i].copy()

    def classify(self, key) -> int:
        # np.argmax returns the first maximum: ties go to the lowest class id
        return int(np.argmax(self.class_distribution(key)))

    def state_grid(self) -> np.ndarray:
        p = sigmoid(self.log_odds)
        g = np.full(self.shape, _kernels.UNKNOWN, dtype=np.int8)
        g[self.stored & (p > 0.5 + self.theta)] = _kernels.OCCUPIED
        g[self.stored & (p < 0.5 - self.theta)] = _kernels.FREE
        return g

    def coverage_stats(self) -> CoverageStats:
        g = self.state_grid()
        occ = g == _kernels.OCCUPIED
        n_occ = int(occ.sum())
        n_free = int((g == _kernels.FREE).sum())
        labels = np.argmax(self.probs[occ], axis=-1) if n_occ else np.empty(0, dtype=int)
        per_class = tuple(int(v) for v in np.bincount(labels, minlength=self.K))
        return CoverageStats(n_occ, n_free, self.total_voxels - n_occ - n_free, per_class)

    # updates ---------------------------------------------------------------
    def set_voxel(self, key, log_odds: float, classes=None, hits: int = 0) -> None:
        """Direct write, for fixtures and import."""
        i = self._index(key)
        if i is None:
            raise KeyError(f"voxel {tuple(key)} is outside the map bounds")
        self.stored[i] = True
        self.log_odds[i] = min(max(float(log_odds), self.l_min), self.l_max)
        if classes is not None:
            c = np.asarray(classes, dtype=float)
            self.probs[i] = c / c.sum()
        self.hits[i] = hits

    def integrate_cloud(self, cloud: LabeledCloud) -> IntegrationReport:
        origin = np.asarray(cloud.origin, dtype=float)
        if not self.contains_point(origin):
            raise ValueError(f"sensor origin {origin} is outside the map bounds")
        self._stamp_id += 1
        pts = np.ascontiguousarray(cloud.points, dtype=float).reshape(-1, 3)
        cls = np.ascontiguousarray(cloud.classes, dtype=float).reshape(-1, self.K)
        free = np.ascontiguousarray(cloud.free_ends, dtype=float).reshape(-1, 3)
        touched, new, degenerate = _kernels.integrate(
            self.log_odds, self.stored, self.hits, self.probs, self._stamp, self._stamp_id,
            origin, pts, cls, free, self.resolution, self.origin, self.kmin,
            logit(self.p_hit), logit(self.p_miss), self.l_min, self.l_max, self.class_floor,
        )
        return IntegrationReport(int(touched), int(new), int(degenerate))

    def snapshot(self, class_weights: Optional[Sequence[float]] = None) -> MapSnapshot:
        state = self.state_grid()
        weight = np.zeros(self.shape)
        if class_weights is not None and np.any(np.asarray(class_weights) != 0):
            weight = self._neighbor_weights(state, np.asarray(class_weights, dtype=float))
        state.setflags(write=False)
        weight.setflags(write=False)
        return MapSnapshot(state, weight, self.resolution, self.origin.copy(), self.kmin.copy(),
                           (self.bounds[0].copy(), self.bounds[1].copy()))

    def _neighbor_weights(self, state: np.ndarray, w: np.ndarray) -> np.ndarray:
        # weight of the class held most confidently among occupied 6-neighbors
        top_p = np.where(state == _kernels.OCCUPIED, self.probs.max(axis=-1), -1.0)
        top_c = np.argmax(self.probs, axis=-1)
        best_p = np.full(self.shape, -1.0)
        best_w = np.zeros(self.shape)
        pad_p = np.pad(top_p, 1, constant_values=-1.0)
        pad_c = np.pad(top_c, 1)
        nx, ny, nz = self.shape
        for dx, dy, dz in ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)):
            sl = (slice(1 + dx, 1 + dx + nx), slice(1 + dy, 1 + dy + ny), slice(1 + dz, 1 + dz + nz))
            p, c = pad_p[sl], pad_c[sl]
            better = p > best_p
            best_p = np.where(better, p, best_p)
            best_w = np.where(better & (p >= 0), w[c], best_w)
        return best_w

    # io --------------------------------------------------------------------
    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["voxel_x", "voxel_y", "voxel_z", "log_odds", "p_occ", "class_id", "class_p"])
            for idx in np.argwhere(self.stored):
                i = tuple(idx)
                k = idx + self.kmin
                l = self.log_odds[i]
                c = int(np.argmax(self.probs[i]))
                wr.writerow([int(k[0]), int(k[1]), int(k[2]), repr(float(l)), repr(float(sigmoid(l))),
                             c, repr(float(self.probs[i][c]))])

    @classmethod
    def from_csv(cls, path, bounds, resolution: float, n_classes: int, **kwargs) -> "VoxelMap":
        """Rebuild a map; the argmax class keeps ``class_p`` and the rest is
        spread evenly over the other classes."""
        vm = cls(bounds, resolution, n_classes, **kwargs)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["voxel_x"]), int(row["voxel_y"]), int(row["voxel_z"]))
                c, cp = int(row["class_id"]), float(row["class_p"])
                dist = np.full(n_classes, (1.0 - cp) / (n_classes - 1) if n_classes > 1 else 1.0)
                dist[c] = cp
                vm.set_voxel(key, float(row["log_odds"]), dist)
        return vm
