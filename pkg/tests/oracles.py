"""Brute-force reference implementations used only by the tests.

None of these share code with the package beyond plain data containers.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def _floor3(p):
    return tuple(int(math.floor(c)) for c in p)


def sample_traverse(g0, g1, dims, n=2000):
    """Voxels visited by ``n`` evenly spaced samples of the grid-unit segment g0->g1.

    Consecutive samples that jump across several axes at once (an exact edge or
    corner crossing) are completed by stepping x, then y, then z. ``n - 1`` must
    be odd so that no sample sits on a boundary of a half-integer-aligned segment.
    """
    assert (n - 1) % 2 == 1
    g0 = np.asarray(g0, dtype=np.float64)
    g1 = np.asarray(g1, dtype=np.float64)
    seq = [_floor3(g0)]
    for k in range(1, n):
        t = k / (n - 1)
        v = _floor3(g0 + t * (g1 - g0)) if k < n - 1 else _floor3(g1)
        prev = seq[-1]
        while v != prev:
            cur = list(prev)
            for a in range(3):
                if cur[a] != v[a]:
                    cur[a] += 1 if v[a] > cur[a] else -1
                    break
            prev = tuple(cur)
            seq.append(prev)
    return [v for v in seq if all(0 <= v[a] < dims[a] for a in range(3))]


def slab_traverse(g0, g1, dims):
    """Every voxel whose closed cell meets the segment in a positive length, by entry parameter."""
    g0 = np.asarray(g0, dtype=np.float64)
    g1 = np.asarray(g1, dtype=np.float64)
    d = g1 - g0
    lo = np.maximum(np.floor(np.minimum(g0, g1)).astype(int), 0)
    hi = np.minimum(np.floor(np.maximum(g0, g1)).astype(int), np.asarray(dims) - 1)
    hits = []
    for v in itertools.product(*(range(lo[a], hi[a] + 1) for a in range(3))):
        t_in, t_out = 0.0, 1.0
        for a in range(3):
            if d[a] == 0:
                if not v[a] <= g0[a] < v[a] + 1:
                    t_in, t_out = 1.0, 0.0
                continue
            ta, tb = (v[a] - g0[a]) / d[a], (v[a] + 1 - g0[a]) / d[a]
            t_in, t_out = max(t_in, min(ta, tb)), min(t_out, max(ta, tb))
        if t_out - t_in > 0:
            hits.append((t_in, v))
    hits.sort()
    return [v for _, v in hits]


def project_scalar(point, camera):
    """Pinhole projection written out component by component."""
    E = camera.extrinsics
    xc = [sum(E[r][c] * point[c] for c in range(3)) + E[r][3] for r in range(3)]
    if xc[2] <= 0:
        return None
    return camera.fx * xc[0] / xc[2] + camera.cx, camera.fy * xc[1] / xc[2] + camera.cy, xc[2]


def range_oracle(grid, labels_xyz, camera):
    """(linear index, i, j) of semantic voxels whose center projects into the image."""
    X, Y, Z = grid.dims
    out = []
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                lab = labels_xyz[x, y, z]
                if lab == 0 or lab == 255:
                    continue
                c = [grid.origin[a] + grid.voxel_size * (v + 0.5) for a, v in enumerate((x, y, z))]
                p = project_scalar(c, camera)
                if p is None:
                    continue
                i, j = math.floor(p[0]), math.floor(p[1])
                if 0 <= i < camera.width and 0 <= j < camera.height:
                    out.append((x + X * (y + Y * z), i, j))
    return out


def visible_oracle(cam_g, target_voxel, occupied_xyz, threshold=1, n=2000):
    """Visibility by fine sampling of the camera->voxel-center segment (grid units)."""
    dims = occupied_xyz.shape
    target = np.asarray(target_voxel, dtype=np.float64) + 0.5
    cam_voxel = _floor3(cam_g)
    path = sample_traverse(cam_g, target, dims, n)
    blockers = sum(1 for v in path
                   if v != tuple(target_voxel) and v != cam_voxel and occupied_xyz[v])
    return blockers < threshold


def confusion_oracle(pred, gt, num_classes, include_empty=False):
    n = num_classes + 1
    counts = [[0] * n for _ in range(n)]
    unmatched = [0] * n
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if g == 255 or (g == 0 and not include_empty):
            continue
        if p > num_classes:
            unmatched[g] += 1
        else:
            counts[g][p] += 1
    return counts, unmatched


def iou_oracle(pred, gt, num_classes, include_empty=False):
    counts, unmatched = confusion_oracle(pred, gt, num_classes, include_empty)
    n = num_classes + 1
    out = []
    for c in range(n):
        tp = counts[c][c]
        fp = sum(counts[r][c] for r in range(n)) - tp
        fn = sum(counts[c]) + unmatched[c] - tp
        out.append(tp / (tp + fp + fn) if tp + fp + fn else float("nan"))
    return out
