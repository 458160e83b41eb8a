"""Label volumes and 2D segmentation maps shared across the pipeline.

Label conventions: 0 is empty space, 1..K are semantic classes, 255 is
unknown/invalid. Volumes are stored flat in linear-index order
``x + X * (y + Y * z)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import VoxelGrid

EMPTY = 0
INVALID = 255


@dataclass(frozen=True, eq=False)
class LabelVolume:
    grid: VoxelGrid
    labels: np.ndarray

    def __post_init__(self):
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.uint8).reshape(-1))
        if lab.shape[0] != self.grid.num_voxels:
            raise ValueError(f"label count {lab.shape[0]} does not match grid {self.grid.dims}")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @classmethod
    def from_xyz(cls, grid: VoxelGrid, arr: np.ndarray) -> "LabelVolume":
        """Build from an array indexed ``[x, y, z]``."""
        arr = np.asarray(arr)
        if arr.shape != grid.dims:
            raise ValueError("array shape does not match grid dims")
        return cls(grid, arr.transpose(2, 1, 0).reshape(-1))

    def as_xyz(self) -> np.ndarray:
        X, Y, Z = self.grid.dims
        return self.labels.reshape(Z, Y, X).transpose(2, 1, 0)

    def semantic_mask(self) -> np.ndarray:
        """Voxels carrying a semantic class (neither empty nor invalid)."""
        return (self.labels != EMPTY) & (self.labels != INVALID)

    def with_labels(self, labels: np.ndarray) -> "LabelVolume":
        return LabelVolume(self.grid, labels)

    def check_classes(self, num_classes: int) -> None:
        bad = (self.labels > num_classes) & (self.labels != INVALID)
        if np.any(bad):
            raise ValueError(f"label ids outside 0..{num_classes} and 255 present")


@dataclass(frozen=True, eq=False)
class SegMap2D:
    """Per-pixel teacher class ids and confidences, arrays indexed ``[row j, col i]``."""

    classes: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        cls_ = np.ascontiguousarray(np.asarray(self.classes, dtype=np.uint8))
        conf = np.ascontiguousarray(np.asarray(self.confidence, dtype=np.float64))
        if cls_.ndim != 2 or cls_.shape != conf.shape:
            raise ValueError("class and confidence maps must share an (H, W) shape")
        if not (np.all(conf > 0) and np.all(conf <= 1)):
            raise ValueError("confidence must lie in (0, 1]")
        object.__setattr__(self, "classes", cls_)
        object.__setattr__(self, "confidence", conf)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]
