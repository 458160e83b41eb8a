"""Small random scenes for selection tests (camera centers on the voxel-center lattice)."""
from __future__ import annotations

import numpy as np

from ovo.geometry import CameraModel, VoxelGrid
from ovo.volumes import LabelVolume


def lattice_scene(rng, max_dim=12, fill=0.25, invalid=0.03):
    dims = tuple(int(d) for d in rng.integers(3, max_dim + 1, size=3))
    origin = tuple(float(o) for o in rng.integers(-3, 4, size=3))
    size = float(2.0 ** rng.integers(-2, 2))
    grid = VoxelGrid(dims, origin, size)
    xyz = np.zeros(dims, dtype=np.uint8)
    occ = rng.random(dims) < fill
    xyz[occ] = rng.integers(1, 4, size=int(occ.sum()))
    xyz[rng.random(dims) < invalid] = 255
    labels = LabelVolume.from_xyz(grid, xyz)
    # camera center on a voxel center (possibly outside the grid), looking at the grid middle
    while True:
        g = rng.integers(-3, np.asarray(dims) + 3) + 0.5
        mid = np.asarray(dims) / 2.0
        if np.linalg.norm(g - mid) > 1.0:
            break
    eye = np.asarray(origin) + size * g
    target = np.asarray(origin) + size * (mid + rng.uniform(-0.5, 0.5, 3))
    fwd = (target - eye) / np.linalg.norm(target - eye)
    up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    W, H = 40, 30
    f = float(rng.uniform(12, 30))
    cam = CameraModel.look_at(eye, target, up, f, f, W / 2, H / 2, W, H)
    return grid, labels, xyz, cam, g
