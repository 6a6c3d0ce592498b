"""Sense-plan-act episodes, multi-seed aggregation, the flight-time model and
camera-count design selection."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from multicam_nbv.mapping import VoxelMap
from multicam_nbv.planner import PlannerParams, PlanningStuck, act, is_collision_free, plan_next
from multicam_nbv.scene import Scene, load_scene, make_drydock, ray_cast, ray_cast_many
from multicam_nbv.sensor import LabeledCloud, Pose, Rig, default_rig, load_rig, sense_all

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PowerModel:
    """Hover time until battery depletion, minutes, as (mean, std) per camera count."""

    table: dict = field(default_factory=lambda: {1: (8.79, 0.86), 3: (8.17, 0.41), 5: (6.00, 0.99)})

    def __post_init__(self):
        for m, (mean, std) in self.table.items():
            if mean <= 0 or std < 0:
                raise ValueError(f"bad flight time entry for M={m}: {(mean, std)}")


def flight_time(power: PowerModel, M: int) -> float:
    """Table lookup, linear interpolation between tabulated camera counts."""
    if not isinstance(M, (int, np.integer)) or not 1 <= M <= 5:
        raise ValueError(f"M must be an integer in 1..5, got {M!r}")
    if M in power.table:
        return float(power.table[M][0])
    ms = sorted(power.table)
    lo = max(m for m in ms if m < M)
    hi = min(m for m in ms if m > M)
    a, b = power.table[lo][0], power.table[hi][0]
    return a + (b - a) * (M - lo) / (hi - lo)


@dataclass
class ExperimentConfig:
    scene: Union[str, dict, None] = None  # scene file path, or make_drydock kwargs; None = default dock
    rigs: list = field(default_factory=lambda: [1, 3, 5])  # camera-count presets or rig file paths
    iterations: int = 300
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    resolution: float = 0.4
    planner: dict = field(default_factory=dict)
    sense_rate: float = 2.0
    confusion: float = 0.1
    stride: int = 4
    depth_noise: float = 0.0
    start: Optional[list] = None  # [x, y, z, yaw]
    safety_margin: Optional[float] = None  # None: half the robot radius
    jobs: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not self.rigs:
            raise ValueError("need at least one rig variant")
        if not self.resolution > 0 or not self.sense_rate > 0:
            raise ValueError("resolution and sense_rate must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        PlannerParams(**self.planner)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def planner_params(self) -> PlannerParams:
        p = dict(self.planner)
        if p.get("class_weights") is not None:
            p["class_weights"] = tuple(p["class_weights"])
        return PlannerParams(**p)

    def build_scene(self, base: Optional[Path] = None) -> Scene:
        if self.scene is None:
            return make_drydock()
        if isinstance(self.scene, dict):
            return make_drydock(**self.scene)
        path = Path(self.scene)
        if base is not None and not path.is_absolute():
            path = base / path
        return load_scene(path)

    def build_rigs(self, base: Optional[Path] = None) -> list[Rig]:
        rigs = []
        for r in self.rigs:
            if isinstance(r, int):
                rigs.append(default_rig(r))
            else:
                path = Path(r)
                if base is not None and not path.is_absolute():
                    path = base / path
                rigs.append(load_rig(path))
        return rigs


@dataclass
class CoverageRecord:
    iteration: int
    occupied: int
    free: int
    unknown: int
    plan_time: float  # cumulative seconds
    sense_time: float
    integrate_time: float


@dataclass
class PlanDiagnostic:
    iteration: int
    tree_size: int
    best_gain: float
    pose: Pose
    recovery: bool
    blocked: bool = False


@dataclass
class Episode:
    records: list[CoverageRecord]
    diagnostics: list[PlanDiagnostic]
    failed: bool = False
    error: str = ""
    degenerate_views: int = 0
    blocked_moves: int = 0


def planning_bounds(scene: Scene, params: PlannerParams):
    """Scene bounds shrunk by the robot radius, so camera origins stay inside."""
    lo = np.asarray(scene.bounds[0]) + params.robot_radius
    hi = np.asarray(scene.bounds[1]) - params.robot_radius
    if np.any(lo >= hi):
        raise ValueError("scene bounds are too small for the robot radius")
    return lo, hi


def default_start(scene: Scene, altitude: float = 1.5) -> Pose:
    """Bounds center in x/y, ``altitude`` above the first surface below it."""
    lo, hi = (np.asarray(b) for b in scene.bounds)
    c = 0.5 * (lo + hi)
    top = np.array([c[0], c[1], hi[2]])
    hit = ray_cast(scene, top, (0.0, 0.0, -1.0), hi[2] - lo[2])
    ground = hi[2] - hit.t if hit is not None else lo[2]
    return Pose((c[0], c[1], ground + altitude), 0.0)


def safety_margin(config: ExperimentConfig, params: PlannerParams) -> float:
    if config.safety_margin is not None:
        return float(config.safety_margin)
    return 0.5 * params.robot_radius


def move_is_safe(scene: Scene, current: Pose, target: Pose, margin: float) -> bool:
    """Ground-truth clearance of the executed edge (midpoint and end)."""
    a, b = current.xyz, target.xyz
    return all(scene.clearance(p) >= margin for p in (0.5 * (a + b), b))


def contact_cloud(scene: Scene, current: Pose, target: Pose, reach: float, n: int = 7,
                  half_angle: float = math.radians(30)) -> LabeledCloud:
    """Short-range proximity scan along a refused edge.

    Casts an n x n fan of rays around the commanded direction; hits carry a
    uniform class distribution and misses carve nothing.
    """
    o = current.xyz
    d = target.xyz - o
    norm = np.linalg.norm(d)
    K = scene.classes.K
    if norm == 0:
        return LabeledCloud(o, np.empty((0, 3)), np.empty((0, K)), np.empty((0, 3)))
    z = d / norm
    helper = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    a = np.tan(np.linspace(-half_angle, half_angle, n))
    ax, ay = np.meshgrid(a, a)
    dirs = z + ax.reshape(-1, 1) * x + ay.reshape(-1, 1) * y
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, cls = ray_cast_many(scene, np.broadcast_to(o, dirs.shape), dirs, np.full(len(dirs), norm + reach))
    hit = (cls >= 0) & (t > 0)
    pts = o + dirs[hit] * t[hit, None]
    return LabeledCloud(o, pts, np.full((len(pts), K), 1.0 / K), np.empty((0, 3)))


def run_episode(scene: Scene, rig: Rig, config: ExperimentConfig, seed: int) -> Episode:
    params = config.planner_params()
    bounds = planning_bounds(scene, params)
    vmap = VoxelMap(scene.bounds, config.resolution, scene.classes.K)
    margin = safety_margin(config, params)
    pose = Pose(tuple(config.start[:3]), config.start[3] if len(config.start) > 3 else 0.0) \
        if config.start is not None else default_start(scene)
    if scene.clearance(pose.position) < margin or not vmap.contains_point(pose.position):
        raise ValueError(f"start pose {pose.position} is not collision-free")
    ss = np.random.SeedSequence(seed)
    plan_rng, sense_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    weights = params.class_weights if params.alpha > 0 else None
    blocked = 0

    records, diags = [], []
    t_plan = t_sense = t_int = 0.0
    degenerate = 0
    for it in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        clouds = sense_all(scene, pose, rig, config.confusion, config.stride, sense_rng, config.depth_noise)
        t1 = time.perf_counter()
        for cloud in clouds:
            degenerate += cloud.degenerate
            vmap.integrate_cloud(cloud)
        t2 = time.perf_counter()
        t_sense += t1 - t0
        t_int += t2 - t1
        cov = vmap.coverage_stats()
        t3 = time.perf_counter()
        try:
            result = plan_next(vmap.snapshot(weights), pose, rig, params, bounds, plan_rng)
        except PlanningStuck as exc:
            t_plan += time.perf_counter() - t3
            records.append(CoverageRecord(it, cov.occupied, cov.free, cov.unknown, t_plan, t_sense, t_int))
            return Episode(records, diags, True, str(exc), degenerate, blocked)
        t_plan += time.perf_counter() - t3
        records.append(CoverageRecord(it, cov.occupied, cov.free, cov.unknown, t_plan, t_sense, t_int))
        # the vehicle refuses edges that would bring it into real geometry
        safe = move_is_safe(scene, pose, result.pose, margin)
        diags.append(PlanDiagnostic(it, result.tree_size, result.best_gain, result.pose, result.recovery, not safe))
        if safe:
            pose = act(pose, result.pose)
        else:
            blocked += 1
            vmap.integrate_cloud(contact_cloud(scene, pose, result.pose, margin))
    return Episode(records, diags, False, "", degenerate, blocked)


@dataclass
class Curve:
    """Pointwise mean/std over seeds for one rig variant."""

    M: int
    mean_occupied: np.ndarray
    std_occupied: np.ndarray
    mean_free: np.ndarray
    mean_unknown: np.ndarray
    mean_plan_ms: np.ndarray
    mean_sense_ms: np.ndarray
    mean_integrate_ms: np.ndarray
    n_runs: int

    def __len__(self):
        return len(self.mean_occupied)


def _per_iter_ms(cum: np.ndarray) -> np.ndarray:
    return np.diff(cum, prepend=0.0) * 1000.0


def aggregate(M: int, episodes: Sequence[Episode]) -> Curve:
    good = [e for e in episodes if not e.failed]
    if not good:
        raise RuntimeError(f"every episode failed for M={M}")
    T = min(len(e.records) for e in good)
    occ = np.array([[r.occupied for r in e.records[:T]] for e in good], dtype=float)
    free = np.array([[r.free for r in e.records[:T]] for e in good], dtype=float)
    unk = np.array([[r.unknown for r in e.records[:T]] for e in good], dtype=float)
    plan = np.array([_per_iter_ms(np.array([r.plan_time for r in e.records[:T]])) for e in good])
    sense = np.array([_per_iter_ms(np.array([r.sense_time for r in e.records[:T]])) for e in good])
    integ = np.array([_per_iter_ms(np.array([r.integrate_time for r in e.records[:T]])) for e in good])
    return Curve(M, occ.mean(0), occ.std(0), free.mean(0), unk.mean(0), plan.mean(0), sense.mean(0),
                 integ.mean(0), len(good))


def _episode_job(args):
    scene, rig, config, seed = args
    try:
        return run_episode(scene, rig, config, seed)
    except PlanningStuck as exc:  # raised only before the first record
        return Episode([], [], True, str(exc))


@dataclass
class ExperimentResult:
    curves: dict  # M -> Curve
    episodes: dict  # (M, seed) -> Episode


def run_experiment(config: ExperimentConfig, scene: Optional[Scene] = None,
                   rigs: Optional[Sequence[Rig]] = None) -> ExperimentResult:
    scene = scene if scene is not None else config.build_scene()
    rigs = list(rigs) if rigs is not None else config.build_rigs()
    Ms = [r.M for r in rigs]
    if len(set(Ms)) != len(Ms):
        raise ValueError(f"rig variants must have distinct camera counts, got {Ms}")
    jobs = [(scene, rig, config, seed) for rig in rigs for seed in config.seeds]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            results = list(pool.map(_episode_job, jobs))
    else:
        results = [_episode_job(j) for j in jobs]
    episodes = {}
    for (_, rig, _, seed), ep in zip(jobs, results):
        if ep.failed:
            log.warning("episode M=%d seed=%d failed: %s", rig.M, seed, ep.error)
        episodes[(rig.M, seed)] = ep
    curves = {M: aggregate(M, [episodes[(M, s)] for s in config.seeds]) for M in Ms}
    return ExperimentResult(curves, episodes)


def time_to_coverage(curve: Sequence[float], fraction: float, reference: Optional[float] = None) -> Optional[int]:
    """First 1-based iteration whose value reaches ``fraction * reference``.

    ``reference`` defaults to the curve's own final value.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    c = np.asarray(curve, dtype=float)
    if not len(c):
        return None
    threshold = fraction * (c[-1] if reference is None else reference)
    idx = np.nonzero(c >= threshold)[0]
    return int(idx[0]) + 1 if len(idx) else None


def budget_iterations(power: PowerModel, M: int, sense_rate: float) -> int:
    return int(math.floor(flight_time(power, M) * 60.0 * sense_rate))


def select_design(curves: dict, power: PowerModel, sense_rate: float) -> tuple[int, dict]:
    """Pick the camera count whose mean occupied count is highest once the
    episode is truncated to what its battery allows. Ties go to fewer cameras.

    ``curves`` maps M to a mean-occupied sequence (or a Curve).
    """
    if not curves:
        raise ValueError("no curves to select from")
    report = {}
    for M in sorted(curves):
        c = curves[M]
        occ = np.asarray(c.mean_occupied if isinstance(c, Curve) else c, dtype=float)
        if not len(occ):
            raise ValueError(f"empty curve for M={M}")
        budget = budget_iterations(power, M, sense_rate)
        n = min(budget, len(occ))
        score = float(occ[n - 1]) if n >= 1 else 0.0
        report[M] = {"flight_time": flight_time(power, M), "budget_iterations": budget,
                     "scored_iteration": n, "score": score}
    best = max(sorted(report), key=lambda m: (report[m]["score"], -m))
    return best, report


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_outputs(result: ExperimentResult, config: ExperimentConfig, out_dir, power: Optional[PowerModel] = None) -> dict:
    """Curve CSVs, timing CSVs, planner diagnostics and the summary JSON.

    Everything except the timing files is a deterministic function of the
    config.
    """
    power = power or PowerModel()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = result.curves
    for M, c in curves.items():
        with open(out / f"curve_M{M}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "mean_occupied", "std_occupied", "mean_free", "mean_unknown"])
            for i in range(len(c)):
                w.writerow([i + 1, _fmt(c.mean_occupied[i]), _fmt(c.std_occupied[i]), _fmt(c.mean_free[i]),
                            _fmt(c.mean_unknown[i])])
        with open(out / f"timing_M{M}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "mean_plan_ms", "mean_sense_ms", "mean_integrate_ms"])
            for i in range(len(c)):
                w.writerow([i + 1, _fmt(c.mean_plan_ms[i]), _fmt(c.mean_sense_ms[i]), _fmt(c.mean_integrate_ms[i])])
    for (M, seed), ep in sorted(result.episodes.items()):
        with open(out / f"planner_M{M}_seed{seed}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "tree_size", "best_gain", "chosen_x", "chosen_y", "chosen_z", "chosen_yaw",
                        "recovery_flag", "blocked_flag"])
            for d in ep.diagnostics:
                x, y, z = d.pose.position
                w.writerow([d.iteration, d.tree_size, _fmt(d.best_gain), _fmt(x), _fmt(y), _fmt(z), _fmt(d.pose.yaw),
                            int(d.recovery), int(d.blocked)])
    summary = summarize(result, config, power)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def summarize(result: ExperimentResult, config: ExperimentConfig, power: PowerModel) -> dict:
    curves = result.curves
    ref = max(float(c.mean_occupied[-1]) for c in curves.values())
    chosen, report = select_design(curves, power, config.sense_rate)
    per_m = {}
    for M, c in curves.items():
        per_m[str(M)] = {
            "final_occupied": round(float(c.mean_occupied[-1]), 6),
            "final_free": round(float(c.mean_free[-1]), 6),
            "final_unknown": round(float(c.mean_unknown[-1]), 6),
            "time_to_coverage_90": time_to_coverage(c.mean_occupied, 0.9, ref),
            "flight_time": flight_time(power, M) if 1 <= M <= 5 else None,
            "budget_iterations": report[M]["budget_iterations"],
            "score": round(report[M]["score"], 6),
            "runs": c.n_runs,
        }
    failed = sorted(f"M{M}_seed{s}" for (M, s), e in result.episodes.items() if e.failed)
    return {"variants": per_m, "selected_M": chosen, "iterations": config.iterations,
            "seeds": list(config.seeds), "failed_episodes": failed}
