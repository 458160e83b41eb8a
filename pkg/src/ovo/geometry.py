"""Camera model, voxel grid indexing, pinhole projection and voxel ray traversal.

All arithmetic is float64. Pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``, so a
projection ``(u, v)`` lands in pixel ``(floor(u), floor(v))``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numba
import numpy as np

# Crossing parameters closer than this are treated as simultaneous and
# resolved in x, y, z order.
TIE_EPS = 1e-12


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple[int, int, int]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxel_size: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be > 0")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def num_voxels(self) -> int:
        X, Y, Z = self.dims
        return X * Y * Z

    def contains_index(self, idx) -> bool:
        return all(0 <= int(i) < d for i, d in zip(idx, self.dims))

    def linear_index(self, idx) -> int:
        if not self.contains_index(idx):
            raise IndexError("index outside grid")
        X, Y, _ = self.dims
        x, y, z = (int(i) for i in idx)
        return x + X * (y + Y * z)

    def unravel(self, lin):
        """Linear index (scalar or array) -> (x, y, z)."""
        X, Y, _ = self.dims
        lin = np.asarray(lin, dtype=np.int64)
        return lin % X, (lin // X) % Y, lin // (X * Y)

    def centers(self) -> np.ndarray:
        """World-space centers of every voxel, shape (N, 3), in linear-index order."""
        x, y, z = self.unravel(np.arange(self.num_voxels, dtype=np.int64))
        idx = np.stack([x, y, z], axis=1).astype(np.float64)
        return np.asarray(self.origin) + self.voxel_size * (idx + 0.5)

    def voxel_of(self, point) -> tuple[int, int, int]:
        g = (np.asarray(point, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size
        return tuple(int(v) for v in np.floor(g))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "origin": list(self.origin), "voxel_size": self.voxel_size}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGrid":
        return cls(tuple(d["dims"]), tuple(d["origin"]), d["voxel_size"])


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with a row-major 4x4 world->camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: np.ndarray = field(repr=False)
    width: int
    height: int

    def __post_init__(self):
        E = np.array(self.extrinsics, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        R = E[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-6:
            raise ValueError("extrinsic rotation is not orthonormal")
        if np.abs(E[3] - [0.0, 0.0, 0.0, 1.0]).max() > 0:
            raise ValueError("extrinsics last row must be [0, 0, 0, 1]")
        E.setflags(write=False)
        object.__setattr__(self, "extrinsics", E)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray):
        """Vectorized projection of (N, 3) world points.

        Returns ``(u, v, depth, in_front)``; ``u, v`` are NaN where the point is
        not strictly in front of the camera.
        """
        pc = self.to_camera(points)
        z = pc[:, 2]
        in_front = z > 0
        if np.any(in_front & (z < 1e-12)):
            raise ValueError("degenerate depth")
        safe = np.where(in_front, z, 1.0)
        u = np.where(in_front, self.fx * pc[:, 0] / safe + self.cx, np.nan)
        v = np.where(in_front, self.fy * pc[:, 1] / safe + self.cy, np.nan)
        return u, v, z, in_front

    def pixel_ray(self, i: float, j: float) -> "Ray":
        """Ray through the center of pixel (i, j)."""
        d_cam = np.array([(i + 0.5 - self.cx) / self.fx, (j + 0.5 - self.cy) / self.fy, 1.0])
        d = self.rotation.T @ d_cam
        return Ray(self.center, d / np.linalg.norm(d))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "extrinsics": [float(v) for v in self.extrinsics.ravel()],
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.asarray(d["extrinsics"]).reshape(4, 4),
                   d["width"], d["height"])

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "CameraModel":
        """Camera at ``eye`` with +z toward ``target`` and image y pointing along -up."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        n = np.linalg.norm(right)
        if n < 1e-12:
            raise ValueError("up vector parallel to viewing direction")
        right /= n
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ eye
        return cls(fx, fy, cx, cy, E, width, height)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    behind: bool


def voxel_center(idx: Sequence[int], grid: VoxelGrid) -> np.ndarray:
    if len(idx) != 3 or not grid.contains_index(idx):
        raise IndexError("index outside grid")
    return np.asarray(grid.origin) + grid.voxel_size * (np.asarray(idx, dtype=np.float64) + 0.5)


def project(point_world, camera: CameraModel) -> Projection:
    pc = camera.to_camera(np.asarray(point_world, dtype=np.float64).reshape(1, 3))[0]
    z = float(pc[2])
    if z <= 0:
        return Projection(math.nan, math.nan, z, True)
    if z < 1e-12:
        raise ValueError("degenerate depth")
    return Projection(camera.fx * pc[0] / z + camera.cx, camera.fy * pc[1] / z + camera.cy, z, False)


# ---------------------------------------------------------------------------
# DDA kernels. Coordinates are converted to grid units (voxel edge = 1) and the
# walk advances exactly sum(|target_voxel - start_voxel|) steps, so it always
# terminates on the target's voxel. Crossing parameters are recomputed from the
# boundary index each step (no accumulated increments).


@numba.njit(cache=True, nogil=True)
def _walk_setup(g0, g1, cur, step, remaining, tnext):
    for a in range(3):
        cur[a] = int(math.floor(g0[a]))
        end = int(math.floor(g1[a]))
        d = g1[a] - g0[a]
        if end > cur[a]:
            step[a] = 1
            remaining[a] = end - cur[a]
            tnext[a] = (cur[a] + 1 - g0[a]) / d
        elif end < cur[a]:
            step[a] = -1
            remaining[a] = cur[a] - end
            tnext[a] = (cur[a] - g0[a]) / d
        else:
            step[a] = 0
            remaining[a] = 0
            tnext[a] = np.inf


@numba.njit(cache=True, nogil=True)
def _walk_advance(g0, g1, cur, step, remaining, tnext):
    tmin = np.inf
    for a in range(3):
        if remaining[a] > 0 and tnext[a] < tmin:
            tmin = tnext[a]
    axis = 0
    for a in range(3):
        if remaining[a] > 0 and tnext[a] <= tmin + TIE_EPS:
            axis = a
            break
    cur[axis] += step[axis]
    remaining[axis] -= 1
    k = cur[axis] + 1 if step[axis] > 0 else cur[axis]
    tnext[axis] = (k - g0[axis]) / (g1[axis] - g0[axis])


@numba.njit(cache=True, nogil=True)
def _traverse_kernel(g0, g1, dims, out):
    cur = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    remaining = np.empty(3, np.int64)
    tnext = np.empty(3, np.float64)
    _walk_setup(g0, g1, cur, step, remaining, tnext)
    n = 0
    while True:
        if 0 <= cur[0] < dims[0] and 0 <= cur[1] < dims[1] and 0 <= cur[2] < dims[2]:
            out[n, 0] = cur[0]
            out[n, 1] = cur[1]
            out[n, 2] = cur[2]
            n += 1
        if remaining[0] + remaining[1] + remaining[2] == 0:
            break
        _walk_advance(g0, g1, cur, step, remaining, tnext)
    return n


@numba.njit(cache=True, nogil=True)
def count_blockers(g0, g1, dims, occupied, skip, limit):
    """Count occupied voxels strictly before the target voxel on the segment g0->g1.

    ``occupied`` is a flat bool array in linear-index order; voxel ``skip``
    (linear index, -1 for none) is never counted. Stops early at ``limit``.
    """
    cur = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    remaining = np.empty(3, np.int64)
    tnext = np.empty(3, np.float64)
    _walk_setup(g0, g1, cur, step, remaining, tnext)
    X, Y, Z = dims[0], dims[1], dims[2]
    count = 0
    entered = False
    while remaining[0] + remaining[1] + remaining[2] > 0:
        if 0 <= cur[0] < X and 0 <= cur[1] < Y and 0 <= cur[2] < Z:
            entered = True
            lin = cur[0] + X * (cur[1] + Y * cur[2])
            if lin != skip and occupied[lin]:
                count += 1
                if count >= limit:
                    return count
        elif entered:
            # a segment leaves a convex box at most once
            return count
        _walk_advance(g0, g1, cur, step, remaining, tnext)
    return count


@numba.njit(cache=True, nogil=True)
def first_hit(g0, g1, dims, occupied, skip):
    """Linear index of the first occupied voxel on the segment (inclusive of both ends), or -1."""
    cur = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    remaining = np.empty(3, np.int64)
    tnext = np.empty(3, np.float64)
    _walk_setup(g0, g1, cur, step, remaining, tnext)
    X, Y, Z = dims[0], dims[1], dims[2]
    entered = False
    while True:
        if 0 <= cur[0] < X and 0 <= cur[1] < Y and 0 <= cur[2] < Z:
            entered = True
            lin = cur[0] + X * (cur[1] + Y * cur[2])
            if lin != skip and occupied[lin]:
                return lin
        elif entered:
            return -1
        if remaining[0] + remaining[1] + remaining[2] == 0:
            return -1
        _walk_advance(g0, g1, cur, step, remaining, tnext)


def to_grid_units(points, grid: VoxelGrid) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - np.asarray(grid.origin)) / grid.voxel_size


def traverse_ray(origin, target, grid: VoxelGrid) -> list[tuple[int, int, int]]:
    """Voxels crossed by the segment origin->target, in order of ray parameter.

    Voxels outside the grid are skipped. Simultaneous crossings step x, then y, then z.
    """
    origin = np.asarray(origin, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not np.any(origin != target):
        raise ValueError("degenerate ray")
    g0 = to_grid_units(origin, grid)
    g1 = to_grid_units(target, grid)
    n_max = int(np.abs(np.floor(g1) - np.floor(g0)).sum()) + 1
    out = np.empty((n_max, 3), dtype=np.int64)
    n = _traverse_kernel(g0, g1, np.asarray(grid.dims, dtype=np.int64), out)
    return [tuple(int(c) for c in row) for row in out[:n]]


def segment_box_exit(origin, direction, grid: VoxelGrid) -> float | None:
    """Largest ray parameter at which the ray is still inside the grid AABB (None if it misses)."""
    lo = np.asarray(grid.origin)
    hi = lo + grid.voxel_size * np.asarray(grid.dims)
    t0, t1 = -np.inf, np.inf
    for a in range(3):
        if direction[a] == 0:
            if not lo[a] <= origin[a] <= hi[a]:
                return None
            continue
        ta = (lo[a] - origin[a]) / direction[a]
        tb = (hi[a] - origin[a]) / direction[a]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    if t1 < max(t0, 0.0):
        return None
    return float(t1)


def save_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
