"""Valid-voxel selection: image-range, occlusion and label-consistency filters."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numba
import numpy as np

from .geometry import CameraModel, VoxelGrid, count_blockers, to_grid_units
from .parallel import chunk_bounds, pmap
from .vocab import CategorySchema
from .volumes import LabelVolume, SegMap2D

FILTER_ORDER = ("range", "occlusion", "consistency")
OCCLUSION_CHUNK = 8192

RECORD_DTYPE = np.dtype([("voxel", "<u4"), ("i", "<u2"), ("j", "<u2"), ("depth", "<f4"),
                         ("confidence", "<f4"), ("flags", "u1")])
FLAG_IN_IMAGE, FLAG_VISIBLE, FLAG_CONSISTENT = 1, 2, 4


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Voxel-pixel pairs for in-image semantic voxels, sorted by linear voxel index.

    A voxel belongs to the valid set when all three flags are true; flags of
    filters that have not run stay true.
    """

    grid: VoxelGrid
    camera: CameraModel
    voxel: np.ndarray
    pixel_i: np.ndarray
    pixel_j: np.ndarray
    depth: np.ndarray
    confidence: np.ndarray
    in_image: np.ndarray
    visible: np.ndarray
    consistent: np.ndarray
    applied: tuple[str, ...] = ()

    def __len__(self):
        return int(self.voxel.shape[0])

    @property
    def valid(self) -> np.ndarray:
        return self.in_image & self.visible & self.consistent

    @property
    def omega(self) -> np.ndarray:
        """Linear voxel indices of the valid set."""
        return self.voxel[self.valid]

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    def valid_subset(self) -> "CorrespondenceSet":
        m = self.valid
        return replace(self, **{k: getattr(self, k)[m] for k in
                                ("voxel", "pixel_i", "pixel_j", "depth", "confidence",
                                 "in_image", "visible", "consistent")})

    def to_records(self) -> np.ndarray:
        rec = np.zeros(len(self), dtype=RECORD_DTYPE)
        rec["voxel"] = self.voxel
        rec["i"] = self.pixel_i
        rec["j"] = self.pixel_j
        rec["depth"] = self.depth
        rec["confidence"] = self.confidence
        rec["flags"] = (self.in_image * FLAG_IN_IMAGE + self.visible * FLAG_VISIBLE
                        + self.consistent * FLAG_CONSISTENT)
        return rec

    def save(self, json_path, filter_config: dict | None = None) -> Path:
        json_path = Path(json_path)
        data_name = json_path.with_suffix(".bin").name
        with open(json_path.parent / data_name, "wb") as fh:
            fh.write(self.to_records().tobytes())
        header = {
            "count": len(self),
            "valid_count": self.count,
            "grid": self.grid.to_dict(),
            "camera": self.camera.to_dict(),
            "filters": filter_config if filter_config is not None else {"applied": list(self.applied)},
            "record": "u32 voxel, u16 i, u16 j, f32 depth, f32 confidence, u8 flags (1=in_image,2=visible,4=consistent)",
            "data": data_name,
        }
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return json_path

    @classmethod
    def load(cls, json_path) -> "CorrespondenceSet":
        json_path = Path(json_path)
        with open(json_path, encoding="utf-8") as fh:
            h = json.load(fh)
        raw = (json_path.parent / h["data"]).read_bytes()
        if len(raw) != h["count"] * RECORD_DTYPE.itemsize:
            raise ValueError("payload size mismatch")
        rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
        flags = rec["flags"]
        applied = tuple(h.get("filters", {}).get("applied", ()))
        return cls(VoxelGrid.from_dict(h["grid"]), CameraModel.from_dict(h["camera"]),
                   rec["voxel"].astype(np.int64), rec["i"].astype(np.int64), rec["j"].astype(np.int64),
                   rec["depth"].astype(np.float64), rec["confidence"].astype(np.float64),
                   (flags & FLAG_IN_IMAGE) > 0, (flags & FLAG_VISIBLE) > 0, (flags & FLAG_CONSISTENT) > 0,
                   applied)


def image_range_filter(grid: VoxelGrid, labels: LabelVolume, camera: CameraModel) -> CorrespondenceSet:
    """Semantic voxels whose center projects in front of the camera and inside the image."""
    cand = np.flatnonzero(labels.semantic_mask())
    x, y, z = grid.unravel(cand)
    centers = np.asarray(grid.origin) + grid.voxel_size * (np.stack([x, y, z], axis=1) + 0.5)
    u, v, depth, front = camera.project_points(centers)
    with np.errstate(invalid="ignore"):
        pi = np.floor(np.where(front, u, -1.0))
        pj = np.floor(np.where(front, v, -1.0))
        ok = front & (pi >= 0) & (pi < camera.width) & (pj >= 0) & (pj < camera.height)
    n = int(ok.sum())
    ones = np.ones(n, dtype=bool)
    return CorrespondenceSet(grid, camera, cand[ok].astype(np.int64), pi[ok].astype(np.int64),
                             pj[ok].astype(np.int64), depth[ok], np.ones(n), ones, ones.copy(),
                             ones.copy(), ("range",))


@numba.njit(cache=True, nogil=True)
def _occlusion_batch(g0, targets, dims, occupied, skip, limit, out):
    for k in range(targets.shape[0]):
        out[k] = count_blockers(g0, targets[k], dims, occupied, skip, limit) < limit


def occlusion_filter(corr: CorrespondenceSet, occupancy: LabelVolume, camera: CameraModel,
                     threshold: int = 1, workers: int = 1) -> CorrespondenceSet:
    """Mark a voxel occluded when ``threshold`` or more occupied voxels lie strictly
    between the camera center and the voxel center along the DDA traversal.

    A voxel containing the camera center never counts as a blocker.
    """
    if threshold < 1:
        raise ValueError("blocker threshold must be >= 1")
    grid = corr.grid
    occupied = occupancy.semantic_mask()
    g0 = to_grid_units(camera.center, grid)
    cam_idx = np.floor(g0).astype(np.int64)
    skip = int(grid.linear_index(cam_idx)) if grid.contains_index(cam_idx) else -1
    x, y, z = grid.unravel(corr.voxel)
    targets = np.stack([x, y, z], axis=1).astype(np.float64) + 0.5
    dims = np.asarray(grid.dims, dtype=np.int64)
    visible = np.empty(len(corr), dtype=np.bool_)

    def run(bounds):
        lo, hi = bounds
        _occlusion_batch(g0, targets[lo:hi], dims, occupied, skip, threshold, visible[lo:hi])

    pmap(run, chunk_bounds(len(corr), OCCLUSION_CHUNK), workers)
    return replace(corr, visible=visible, applied=_applied(corr, "occlusion"))


def attach_confidence(corr: CorrespondenceSet, seg: SegMap2D) -> CorrespondenceSet:
    return replace(corr, confidence=seg.confidence[corr.pixel_j, corr.pixel_i].astype(np.float64))


def label_consistency_filter(corr: CorrespondenceSet, labels: LabelVolume, seg: SegMap2D,
                             schema: CategorySchema) -> CorrespondenceSet:
    """Keep voxels whose training label matches the teacher class at their pixel.

    Both sides are compared after merging novel classes into the unknown id.
    """
    teacher = seg.classes[corr.pixel_j, corr.pixel_i]
    if not np.all(schema.valid_teacher_ids()[teacher]):
        raise ValueError("unknown teacher class")
    lut = schema.merge_lut()
    consistent = lut[labels.labels[corr.voxel]] == lut[teacher]
    corr = attach_confidence(corr, seg)
    return replace(corr, consistent=consistent, applied=_applied(corr, "consistency"))


def _applied(corr, name):
    return corr.applied if name in corr.applied else corr.applied + (name,)


def parse_filters(filters: Iterable[str] | str) -> tuple[str, ...]:
    if isinstance(filters, str):
        filters = [f.strip() for f in filters.split(",") if f.strip()]
    filters = set(filters)
    unknown = filters - set(FILTER_ORDER)
    if unknown:
        raise ValueError(f"unknown filters: {sorted(unknown)}")
    if "range" not in filters:
        raise ValueError("the range filter is required by the occlusion and consistency filters")
    return tuple(f for f in FILTER_ORDER if f in filters)


def build_omega(grid: VoxelGrid, labels: LabelVolume, seg: SegMap2D | None, camera: CameraModel,
                schema: CategorySchema, enabled_filters=FILTER_ORDER, occlusion_threshold: int = 1,
                workers: int = 1):
    """Run the enabled filters in range -> occlusion -> consistency order.

    Returns ``(CorrespondenceSet, counts)`` where counts holds the valid-set size
    after each stage (a disabled stage passes its input through).
    """
    filters = parse_filters(enabled_filters)
    corr = image_range_filter(grid, labels, camera)
    if seg is not None:
        corr = attach_confidence(corr, seg)
    counts = {"after_range": corr.count}
    if "occlusion" in filters:
        corr = occlusion_filter(corr, labels, camera, occlusion_threshold, workers)
    counts["after_occlusion"] = corr.count
    if "consistency" in filters:
        if seg is None:
            raise ValueError("label consistency filter needs a teacher segmentation map")
        corr = label_consistency_filter(corr, labels, seg, schema)
    counts["after_consistency"] = corr.count
    return corr, counts
