import math

import numpy as np
import pytest

from multicam_nbv import planner
from multicam_nbv._kernels import FREE, OCCUPIED, UNKNOWN
from multicam_nbv.mapping import MapSnapshot, VoxelMap
from multicam_nbv.planner import (
    PlannerParams,
    PlanningStuck,
    RrtTree,
    act,
    expand_tree,
    is_collision_free,
    plan_next,
    unknown_visible,
)
from multicam_nbv.scene import make_drydock
from multicam_nbv.sensor import Pose, camera_pose, default_rig, sense_all, wrap_angle


def snapshot(state, res=0.5, origin=(0.0, 0.0, 0.0), weight=None):
    state = np.asarray(state, dtype=np.int8)
    origin = np.asarray(origin, dtype=float)
    hi = origin + np.array(state.shape) * res
    w = np.zeros(state.shape) if weight is None else weight
    return MapSnapshot(state, w, res, origin, np.zeros(3, dtype=np.int64), (origin.copy(), hi))


def fresh(n=16, res=0.5):
    return snapshot(np.full((n, n, n), UNKNOWN), res)


def _segment_hits_box(o, p, lo, hi):
    d = p - o
    t0, t1 = 0.0, 1.0
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if not lo[a] < o[a] < hi[a]:
                return False
            continue
        ta, tb = sorted(((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]))
        t0, t1 = max(t0, ta), min(t1, tb)
    return t1 - t0 > 1e-12


def brute_force_visible(snap, pose, rig, d_max):
    """Set of voxel indices an independent projection + occlusion test counts."""
    res = snap.resolution
    idx = np.argwhere(snap.state == UNKNOWN)
    centers = snap.origin + (idx + 0.5) * res
    occ = np.argwhere(snap.state == OCCUPIED)
    seen = set()
    for m in rig.mounts:
        cam = camera_pose(pose, m)
        i = m.intrinsics
        v = centers - cam.origin
        pc = v @ cam.rotation  # camera-frame coordinates
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = i.fx * pc[:, 0] / z + i.cx
            w = i.fy * pc[:, 1] / z + i.cy
        ok = ((np.linalg.norm(v, axis=1) <= d_max) & (z >= i.min_range) & (z <= d_max)
              & (u >= 0) & (u < i.width) & (w >= 0) & (w < i.height))
        for k in np.nonzero(ok)[0]:
            key = tuple(idx[k])
            if key in seen:
                continue
            blocked = False
            for b in occ:
                lo = snap.origin + b * res
                if _segment_hits_box(cam.origin, centers[k], lo, lo + res):
                    blocked = True
                    break
            if not blocked:
                seen.add(key)
    return seen


# collision ------------------------------------------------------------------

def test_fresh_map_is_free():
    assert is_collision_free(fresh(), Pose((3.1, 2.2, 4.0)), 0.5)


def test_near_occupied_voxel_collides():
    state = np.full((10, 10, 10), UNKNOWN)
    state[4, 4, 4] = OCCUPIED  # center (2.25, 2.25, 2.25)
    snap = snapshot(state)
    assert not is_collision_free(snap, Pose((2.55, 2.25, 2.25)), 0.5)
    assert is_collision_free(snap, Pose((2.85, 2.25, 2.25)), 0.5)


def test_out_of_bounds_collides():
    assert not is_collision_free(fresh(), Pose((-0.1, 1, 1)), 0.5)


# gain -----------------------------------------------------------------------

def test_explored_map_has_no_gain():
    snap = snapshot(np.full((16, 16, 16), FREE))
    assert unknown_visible(snap, Pose((4, 4, 4)), default_rig(5), PlannerParams()) == 0.0


@pytest.mark.parametrize("seed", range(6))
def test_gain_matches_brute_force_on_fresh_map(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 25))
    snap = fresh(n)
    pose = Pose(tuple(rng.uniform(1, n * 0.5 - 1, 3)), rng.uniform(-math.pi, math.pi))
    rig = default_rig(1 if seed < 3 else 5)
    params = PlannerParams(gain_stride=1, gain_range=3.0)
    expected = brute_force_visible(snap, pose, rig, 3.0)
    assert unknown_visible(snap, pose, rig, params) == len(expected)


@pytest.mark.parametrize("seed", range(4))
def test_gain_matches_brute_force_with_occluders(seed):
    rng = np.random.default_rng(100 + seed)
    n = 16
    state = np.full((n, n, n), UNKNOWN)
    state[rng.random(state.shape) < 0.15] = FREE
    state[rng.random(state.shape) < 0.04] = OCCUPIED
    pose = Pose(tuple(rng.uniform(1.5, 6.5, 3)), rng.uniform(-math.pi, math.pi))
    state[tuple(np.floor(np.array(pose.position) / 0.5).astype(int))] = FREE
    snap = snapshot(state)
    rig = default_rig(3)
    params = PlannerParams(gain_stride=1, gain_range=3.0)
    expected = brute_force_visible(snap, pose, rig, 3.0)
    assert unknown_visible(snap, pose, rig, params) == len(expected)


def test_wall_hides_what_is_behind_it():
    n = 20
    state = np.full((n, n, n), UNKNOWN)
    state[8, :, :] = OCCUPIED  # wall plane x in [4, 4.5]
    snap = snapshot(state)
    pose = Pose((2.1, 5.1, 5.1), 0.0)  # front camera looks along +x at the wall
    rig = default_rig(1)
    params = PlannerParams(gain_stride=1, gain_range=6.0)
    expected = brute_force_visible(snap, pose, rig, 6.0)
    assert all(k[0] < 8 for k in expected)
    assert unknown_visible(snap, pose, rig, params) == len(expected) > 0
    # removing the wall exposes voxels beyond it
    open_snap = fresh(n)
    assert unknown_visible(open_snap, pose, rig, params) > len(expected)


def test_stride_compensation():
    snap = fresh(24)
    pose = Pose((6.1, 6.1, 6.1), 0.3)
    rig = default_rig(5)
    fine = unknown_visible(snap, pose, rig, PlannerParams(gain_stride=1, gain_range=4.0))
    coarse = unknown_visible(snap, pose, rig, PlannerParams(gain_stride=2, gain_range=4.0))
    assert coarse == pytest.approx(fine, rel=0.15)


def test_occlusion_monotonicity():
    rng = np.random.default_rng(5)
    rig = default_rig(5)
    params = PlannerParams(gain_stride=1, gain_range=4.0)
    for _ in range(15):
        state = np.full((16, 16, 16), UNKNOWN)
        state[rng.random(state.shape) < 0.2] = FREE
        state[rng.random(state.shape) < 0.03] = OCCUPIED
        pose = Pose(tuple(rng.uniform(2, 6, 3)), rng.uniform(-3, 3))
        state[tuple(np.floor(np.array(pose.position) / 0.5).astype(int))] = FREE
        before = unknown_visible(snapshot(state), pose, rig, params)
        more = state.copy()
        add = rng.random(state.shape) < 0.03
        add[tuple(np.floor(np.array(pose.position) / 0.5).astype(int))] = False
        more[add] = OCCUPIED
        assert unknown_visible(snapshot(more), pose, rig, params) <= before


def test_sensing_reduces_local_gain():
    scene = make_drydock()
    rig = default_rig(3)
    params = PlannerParams(gain_stride=1)
    rng = np.random.default_rng(2)
    vm = VoxelMap(scene.bounds, 0.5, scene.classes.K)
    poses = [Pose((10, 6, 5.3), 0.0), Pose((5, 3, 5), 1.0), Pose((16, 9, 4.5), -2.0)]
    for pose in poses:
        before_state = vm.snapshot().state.copy()
        before = unknown_visible(vm.snapshot(), pose, rig, params)
        for c in sense_all(scene, pose, rig, 0.1, 2, rng):
            vm.integrate_cloud(c)
        after_state = vm.snapshot().state
        demoted = np.any((before_state == OCCUPIED) & (after_state != OCCUPIED))
        if not demoted:
            assert unknown_visible(vm.snapshot(), pose, rig, params) <= before


# tree -----------------------------------------------------------------------

def test_colliding_sample_leaves_tree_unchanged():
    state = np.full((10, 10, 10), OCCUPIED)
    state[0, 0, 0] = FREE
    snap = snapshot(state)
    tree = RrtTree.rooted(Pose((0.25, 0.25, 0.25)))
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert not expand_tree(tree, snap, default_rig(1), PlannerParams(), snap.bounds, rng)
    assert len(tree) == 1


def test_child_without_unknown_keeps_parent_gain():
    snap = snapshot(np.full((10, 10, 10), FREE))
    tree = RrtTree.rooted(Pose((2.5, 2.5, 2.5)))
    assert expand_tree(tree, snap, default_rig(5), PlannerParams(), snap.bounds, np.random.default_rng(1))
    child = tree.nodes[1]
    assert child.parent == 0 and child.marginal == 0.0 and child.gain == tree.nodes[0].gain


def test_gain_formula(monkeypatch):
    monkeypatch.setattr(planner, "unknown_visible", lambda *a: 100.0)
    snap = fresh(16)
    tree = RrtTree.rooted(Pose((0.5, 0.5, 0.5)))
    far = (np.array([6.0, 6.0, 6.0]), np.array([7.0, 7.0, 7.0]))
    params = PlannerParams(yaw_weight=0.0, decay=0.5, edge_length=1.0)
    assert expand_tree(tree, snap, default_rig(1), params, far, np.random.default_rng(0))
    child = tree.nodes[1]
    assert child.edge_cost == pytest.approx(1.0, abs=1e-12)
    assert child.gain == pytest.approx(60.65, abs=1e-2)
    assert child.gain == pytest.approx(100 * math.exp(-0.5), abs=1e-12)


def _check_tree(tree, params):
    root = tree.nodes[0]
    assert root.parent is None and root.edge_cost == 0.0 and root.gain == 0.0
    for n in tree.nodes[1:]:
        p = tree.nodes[n.parent]
        edge = (np.linalg.norm(n.pose.xyz - p.pose.xyz)
                + params.yaw_weight * abs(wrap_angle(n.pose.yaw - p.pose.yaw)))
        assert n.edge_cost == pytest.approx(edge, abs=1e-9)
        assert n.path_cost == pytest.approx(p.path_cost + n.edge_cost, abs=1e-9)
        assert n.gain == pytest.approx(p.gain + n.marginal * math.exp(-params.decay * n.path_cost), abs=1e-9)
        assert n.gain >= 0
        assert np.linalg.norm(n.pose.xyz - p.pose.xyz) <= params.edge_length + 1e-9


def test_gain_recursion_and_determinism():
    scene = make_drydock()
    vm = VoxelMap(scene.bounds, 0.5, scene.classes.K)
    rig = default_rig(3)
    start = Pose((10, 6, 5.3), 0.0)
    for c in sense_all(scene, start, rig, 0.1, 4, np.random.default_rng(0)):
        vm.integrate_cloud(c)
    snap = vm.snapshot()
    params = PlannerParams()
    bounds = (np.array([0.5, 0.5, 0.5]), np.array([19.5, 11.5, 6.5]))
    a = plan_next(snap, start, rig, params, bounds, np.random.default_rng(9))
    b = plan_next(snap, start, rig, params, bounds, np.random.default_rng(9))
    _check_tree(a.tree, params)
    assert a.pose == b.pose and a.best_gain == b.best_gain and a.tree_size == b.tree_size
    assert [n.pose for n in a.tree.nodes] == [n.pose for n in b.tree.nodes]


def test_uniform_class_weights_do_not_change_plan_at_zero_alpha():
    scene = make_drydock()
    vm = VoxelMap(scene.bounds, 0.5, scene.classes.K)
    rig = default_rig(1)
    start = Pose((10, 6, 5.3), 0.0)
    for c in sense_all(scene, start, rig, 0.1, 4, np.random.default_rng(0)):
        vm.integrate_cloud(c)
    bounds = (np.array([0.5, 0.5, 0.5]), np.array([19.5, 11.5, 6.5]))
    base = plan_next(vm.snapshot(), start, rig, PlannerParams(), bounds, np.random.default_rng(3))
    for w in (1.0, 7.5):
        params = PlannerParams(alpha=0.0, class_weights=(w,) * 3)
        other = plan_next(vm.snapshot((w,) * 3), start, rig, params, bounds, np.random.default_rng(3))
        assert other.pose == base.pose and other.best_gain == base.best_gain


# plan_next ------------------------------------------------------------------

def test_plan_on_fresh_map_moves():
    snap = fresh(16)
    start = Pose((4, 4, 4), 0.0)
    res = plan_next(snap, start, default_rig(1), PlannerParams(), snap.bounds, np.random.default_rng(0))
    assert not res.recovery and res.best_gain >= 1.0
    assert res.pose != start and is_collision_free(snap, res.pose, 0.5)
    assert np.linalg.norm(res.pose.xyz - start.xyz) <= 1.0 + 1e-9


def test_plan_on_mapped_bounds_recovers():
    snap = snapshot(np.full((16, 16, 16), FREE))
    start = Pose((4, 4, 4), 0.0)
    res = plan_next(snap, start, default_rig(5), PlannerParams(), snap.bounds, np.random.default_rng(0))
    assert res.recovery and res.best_gain < 1.0
    assert res.tree_size == PlannerParams().max_tree_size
    assert np.linalg.norm(res.pose.xyz - start.xyz) <= 2.0 + 1e-9
    assert is_collision_free(snap, res.pose, 0.5)


def test_planning_stuck():
    state = np.full((10, 10, 10), OCCUPIED)
    state[0, 0, 0] = FREE
    snap = snapshot(state)
    with pytest.raises(PlanningStuck):
        plan_next(snap, Pose((0.25, 0.25, 0.25)), default_rig(1), PlannerParams(max_attempts=50),
                  snap.bounds, np.random.default_rng(0))


def two_rooms():
    """12 x 6 x 3 m at 0.5 m: room A (x < 6) mapped free, a wall with one
    door, room B unknown."""
    state = np.full((24, 12, 6), UNKNOWN, dtype=np.int8)
    state[:12] = FREE
    state[12] = OCCUPIED
    state[12, 5:7, 1:5] = FREE  # door: y in [2.5, 3.5], z in [0.5, 2.5]
    return snapshot(state), np.array([6.25, 3.0, 1.5])


@pytest.mark.parametrize("seed", range(10))
def test_first_edge_heads_for_the_door(seed):
    snap, door = two_rooms()
    start = Pose((2.0, 3.0, 1.5), 0.0)
    bounds = (np.array([0.5, 0.5, 0.5]), np.array([11.5, 5.5, 2.5]))
    # all-around rig, so the result does not hinge on the sampled yaw
    res = plan_next(snap, start, default_rig(5), PlannerParams(), bounds, np.random.default_rng(seed))
    assert not res.recovery
    assert np.linalg.norm(res.pose.xyz - door) < np.linalg.norm(start.xyz - door)


# act ------------------------------------------------------------------------

def test_act_identity():
    p = Pose((1, 2, 3), 0.4)
    assert act(p, p) == p


def test_act_moves_exactly_to_target():
    a, b = Pose((0, 0, 0), 0.0), Pose((0.6, 0.8, 0.0), 1.0)
    out = act(a, b)
    assert np.linalg.norm(out.xyz - a.xyz) == pytest.approx(1.0)
    assert out == b


def test_act_yaw_wrap():
    assert act(Pose((0, 0, 0), 3.0), Pose((0, 0, 0), -3.0)).yaw == pytest.approx(-3.0)
