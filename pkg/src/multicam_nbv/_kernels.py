"""Numba kernels for the hot loops: ray/box casting, grid traversal, cloud
integration and visibility gain.

Everything here works on plain arrays. Voxel keys are absolute integer
coordinates ``floor((p - grid_origin) / res)``; dense arrays are indexed by
``key - kmin``.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

UNKNOWN = 0
FREE = 1
OCCUPIED = 2


@njit(cache=True)
def cast_rays(origins, dirs, max_ranges, box_min, box_max):
    """Nearest box hit per ray. Returns (t, box index or -1)."""
    n = origins.shape[0]
    nb = box_min.shape[0]
    t_out = np.full(n, np.inf)
    idx_out = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        best_t = np.inf
        best_b = -1
        for b in range(nb):
            tnear = -np.inf
            tfar = np.inf
            miss = False
            for a in range(3):
                o = origins[i, a]
                d = dirs[i, a]
                lo = box_min[b, a]
                hi = box_max[b, a]
                if d == 0.0:
                    if o < lo or o > hi:
                        miss = True
                        break
                else:
                    t1 = (lo - o) / d
                    t2 = (hi - o) / d
                    if t1 > t2:
                        t1, t2 = t2, t1
                    if t1 > tnear:
                        tnear = t1
                    if t2 < tfar:
                        tfar = t2
            if miss or tnear > tfar or tfar < 0.0:
                continue
            t = tnear if tnear > 0.0 else 0.0
            # strict comparison keeps the lowest box index on ties
            if t <= max_ranges[i] and t < best_t:
                best_t = t
                best_b = b
        if best_b >= 0:
            t_out[i] = best_t
            idx_out[i] = best_b
    return t_out, idx_out


@njit(cache=True)
def voxel_key(p, res, grid_origin):
    k = np.empty(3, dtype=np.int64)
    for a in range(3):
        k[a] = int(math.floor((p[a] - grid_origin[a]) / res))
    return k


@njit(cache=True)
def traverse(o, p, res, grid_origin):
    """Amanatides-Woo traversal of the segment o->p.

    Returns an (n, 3) array of absolute keys in visiting order, from the voxel
    holding ``o`` to the voxel holding ``p``.
    """
    s = voxel_key(o, res, grid_origin)
    e = voxel_key(p, res, grid_origin)
    n_max = abs(e[0] - s[0]) + abs(e[1] - s[1]) + abs(e[2] - s[2]) + 1
    out = np.empty((n_max, 3), dtype=np.int64)
    out[0, 0] = s[0]
    out[0, 1] = s[1]
    out[0, 2] = s[2]
    if n_max == 1:
        return out
    d = np.empty(3)
    length = 0.0
    for a in range(3):
        d[a] = p[a] - o[a]
        length += d[a] * d[a]
    length = math.sqrt(length)
    step = np.zeros(3, dtype=np.int64)
    tmax = np.full(3, np.inf)
    tdelta = np.full(3, np.inf)
    for a in range(3):
        da = d[a] / length
        if da > 0.0:
            step[a] = 1
            tmax[a] = ((s[a] + 1) * res + grid_origin[a] - o[a]) / da
            tdelta[a] = res / da
        elif da < 0.0:
            step[a] = -1
            tmax[a] = (s[a] * res + grid_origin[a] - o[a]) / da
            tdelta[a] = -res / da
    cur = s.copy()
    count = 1
    while count < n_max:
        ax = 0
        if tmax[1] < tmax[ax]:
            ax = 1
        if tmax[2] < tmax[ax]:
            ax = 2
        # never step past the end key on any axis (float guard)
        if cur[ax] == e[ax]:
            best = np.inf
            ax = -1
            for a in range(3):
                if cur[a] != e[a] and tmax[a] < best:
                    best = tmax[a]
                    ax = a
            if ax < 0:
                break
        cur[ax] += step[ax]
        tmax[ax] += tdelta[ax]
        out[count, 0] = cur[0]
        out[count, 1] = cur[1]
        out[count, 2] = cur[2]
        count += 1
    return out[:count]


@njit(cache=True)
def _in_grid(k, kmin, shape):
    for a in range(3):
        i = k[a] - kmin[a]
        if i < 0 or i >= shape[a]:
            return False
    return True


@njit(cache=True)
def _lift(q, floor):
    # in place: pin entries below the floor to it and rescale the rest
    k = q.shape[0]
    low = np.zeros(k, dtype=np.bool_)
    for _ in range(k):
        changed = False
        n_low = 0
        rest = 0.0
        for c in range(k):
            if not low[c] and q[c] < floor:
                low[c] = True
                changed = True
            if low[c]:
                n_low += 1
            else:
                rest += q[c]
        if not changed or rest <= 0.0:
            return
        scale = (1.0 - floor * n_low) / rest
        for c in range(k):
            q[c] = floor if low[c] else q[c] * scale


@njit(cache=True)
def integrate(log_odds, stored, hits, probs, stamp, stamp_id,
              origin, hit_pts, hit_probs, free_pts,
              res, grid_origin, kmin, l_hit, l_miss, l_min, l_max, p_floor):
    """One cloud integration with endpoint priority and one update per voxel.

    ``stamp`` is a persistent int64 grid; endpoint voxels get ``2*stamp_id``
    and carved voxels ``2*stamp_id + 1`` so each voxel is touched once.
    Returns (touched, new, degenerate).
    """
    shape = np.array(log_odds.shape, dtype=np.int64)
    end_mark = 2 * stamp_id
    miss_mark = 2 * stamp_id + 1
    n_hit = hit_pts.shape[0]
    n_free = free_pts.shape[0]
    k_classes = probs.shape[3]
    s = voxel_key(origin, res, grid_origin)

    touched = 0
    new = 0
    degenerate = 0
    valid = np.ones(n_hit, dtype=np.bool_)
    end_keys = np.empty((n_hit, 3), dtype=np.int64)
    first_point = np.full(n_hit, -1, dtype=np.int64)
    n_end = 0
    for i in range(n_hit):
        dd = 0.0
        for a in range(3):
            dd += (hit_pts[i, a] - origin[a]) ** 2
        if dd == 0.0:
            valid[i] = False
            degenerate += 1
            continue
        e = voxel_key(hit_pts[i], res, grid_origin)
        end_keys[i] = e
        if not _in_grid(e, kmin, shape):
            continue
        ix = e[0] - kmin[0]
        iy = e[1] - kmin[1]
        iz = e[2] - kmin[2]
        if stamp[ix, iy, iz] != end_mark:
            stamp[ix, iy, iz] = end_mark
            first_point[n_end] = i
            n_end += 1

    for r in range(n_hit + n_free):
        if r < n_hit:
            if not valid[r]:
                continue
            p = hit_pts[r]
        else:
            p = free_pts[r - n_hit]
        keys = traverse(origin, p, res, grid_origin)
        n_keys = keys.shape[0]
        if r < n_hit:
            n_keys -= 1  # endpoint voxel handled separately
        for j in range(n_keys):
            k = keys[j]
            if k[0] == s[0] and k[1] == s[1] and k[2] == s[2]:
                continue
            if not _in_grid(k, kmin, shape):
                if j > 0:
                    break  # left the convex bounds for good
                continue
            ix = k[0] - kmin[0]
            iy = k[1] - kmin[1]
            iz = k[2] - kmin[2]
            m = stamp[ix, iy, iz]
            if m == end_mark or m == miss_mark:
                continue
            stamp[ix, iy, iz] = miss_mark
            if not stored[ix, iy, iz]:
                stored[ix, iy, iz] = True
                new += 1
            touched += 1
            v = log_odds[ix, iy, iz] + l_miss
            log_odds[ix, iy, iz] = min(max(v, l_min), l_max)

    for q in range(n_end):
        i = first_point[q]
        ix = end_keys[i, 0] - kmin[0]
        iy = end_keys[i, 1] - kmin[1]
        iz = end_keys[i, 2] - kmin[2]
        if not stored[ix, iy, iz]:
            stored[ix, iy, iz] = True
            new += 1
        touched += 1
        v = log_odds[ix, iy, iz] + l_hit
        log_odds[ix, iy, iz] = min(max(v, l_min), l_max)
        total = 0.0
        for c in range(k_classes):
            a = max(probs[ix, iy, iz, c], p_floor) * max(hit_probs[i, c], p_floor)
            probs[ix, iy, iz, c] = a
            total += a
        for c in range(k_classes):
            probs[ix, iy, iz, c] /= total
        _lift(probs[ix, iy, iz], p_floor)
        hits[ix, iy, iz] += 1
    return touched, new, degenerate


@njit(cache=True)
def segment_blocked(o, p, state, res, grid_origin, kmin):
    """True if any OCCUPIED voxel lies on o->p, excluding the voxel of p."""
    shape = np.array(state.shape, dtype=np.int64)
    keys = traverse(o, p, res, grid_origin)
    for j in range(keys.shape[0] - 1):
        k = keys[j]
        if not _in_grid(k, kmin, shape):
            continue
        if state[k[0] - kmin[0], k[1] - kmin[1], k[2] - kmin[2]] == OCCUPIED:
            return True
    return False


@njit(cache=True)
def unknown_visible(state, weight, cam_origins, cam_rots, intr, min_ranges,
                    d_max, stride, res, grid_origin, kmin, alpha):
    """Weighted count of UNKNOWN stride-lattice voxels seen by any camera.

    ``cam_rots`` are world-from-camera rotations; ``intr`` rows hold
    (width, height, fx, fy, cx, cy).
    """
    nx, ny, nz = state.shape
    seen = np.zeros(state.shape, dtype=np.bool_)
    cell = float(stride) ** 3
    total = 0.0
    center = np.empty(3)
    for c in range(cam_origins.shape[0]):
        co = cam_origins[c]
        R = cam_rots[c]
        w = intr[c, 0]
        h = intr[c, 1]
        fx = intr[c, 2]
        fy = intr[c, 3]
        cx = intr[c, 4]
        cy = intr[c, 5]
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        for a in range(3):
            n_a = state.shape[a]
            l = int(math.floor((co[a] - d_max - grid_origin[a]) / res)) - kmin[a]
            u = int(math.floor((co[a] + d_max - grid_origin[a]) / res)) - kmin[a]
            l = max(l, 0)
            u = min(u, n_a - 1)
            # align to the stride sublattice
            l = ((l + stride - 1) // stride) * stride
            lo[a] = l
            hi[a] = u
        for ix in range(lo[0], hi[0] + 1, stride):
            for iy in range(lo[1], hi[1] + 1, stride):
                for iz in range(lo[2], hi[2] + 1, stride):
                    if state[ix, iy, iz] != UNKNOWN or seen[ix, iy, iz]:
                        continue
                    center[0] = grid_origin[0] + (kmin[0] + ix + 0.5) * res
                    center[1] = grid_origin[1] + (kmin[1] + iy + 0.5) * res
                    center[2] = grid_origin[2] + (kmin[2] + iz + 0.5) * res
                    vx = center[0] - co[0]
                    vy = center[1] - co[1]
                    vz = center[2] - co[2]
                    if vx * vx + vy * vy + vz * vz > d_max * d_max:
                        continue
                    zc = R[0, 2] * vx + R[1, 2] * vy + R[2, 2] * vz
                    if zc < min_ranges[c] or zc > d_max:
                        continue
                    xc = R[0, 0] * vx + R[1, 0] * vy + R[2, 0] * vz
                    yc = R[0, 1] * vx + R[1, 1] * vy + R[2, 1] * vz
                    u_px = fx * xc / zc + cx
                    v_px = fy * yc / zc + cy
                    if u_px < 0.0 or u_px >= w or v_px < 0.0 or v_px >= h:
                        continue
                    if segment_blocked(co, center, state, res, grid_origin, kmin):
                        continue
                    seen[ix, iy, iz] = True
                    total += cell * (1.0 + alpha * weight[ix, iy, iz])
    return total
