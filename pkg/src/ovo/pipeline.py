"""Glue between scenes, selection, training and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .alignment import (LossOptions, LossWeights, OptimizerConfig, TrainingBatch, TrainResult,
                        init_heads, train)
from .numerics.fusion import FusionHead
from .scenes import Scene
from .selection import FILTER_ORDER, build_omega
from .vocab import EmbeddingBank, classify_voxels
from .volumes import LabelVolume


def scene_batch(scene: Scene, filters=FILTER_ORDER, occlusion_threshold: int = 1,
                workers: int = 1) -> tuple[TrainingBatch, dict]:
    """Valid-set training rows for one scene, plus the stage counts."""
    if scene.feat3d is None or scene.teacher2d is None:
        raise ValueError(f"scene {scene.name} lacks 3D features or a teacher map")
    corr, counts = build_omega(scene.grid, scene.labels, scene.seg, scene.camera, scene.schema,
                               filters, occlusion_threshold, workers)
    batch = TrainingBatch.from_selection(corr, scene.feat3d, scene.labels.labels, scene.teacher2d,
                                         scene.schema, scene.pyramid, scene.name)
    return batch, counts


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 200
    seed: int = 0
    weights: LossWeights = LossWeights()
    optimizer: OptimizerConfig = OptimizerConfig()
    options: LossOptions = LossOptions()
    filters: tuple[str, ...] = FILTER_ORDER
    occlusion_threshold: int = 1
    hidden3d: tuple[int, ...] = ()
    fusion_hidden: int = 512
    use_2d: bool = True


def train_on_scenes(scenes: Sequence[Scene], bank: EmbeddingBank, settings: TrainSettings = TrainSettings(),
                    workers: int = 1, progress=None) -> tuple[TrainResult, list[dict]]:
    batches, counts = [], []
    for s in scenes:
        b, c = scene_batch(s, settings.filters, settings.occlusion_threshold, workers)
        if not settings.use_2d:
            b.pyramid = None
        batches.append(b)
        counts.append(c)
    first = scenes[0]
    student_dim = first.pyramid[0].shape[-1] if settings.use_2d and first.pyramid is not None else None
    head3d, head2d = init_heads(first.feat3d.shape[1], student_dim, bank.dim, settings.seed,
                                settings.hidden3d, settings.fusion_hidden)
    result = train(batches, head3d, head2d, bank, settings.weights, settings.optimizer, settings.epochs,
                   settings.seed, settings.options, workers, progress)
    return result, counts


def infer_scene(scene: Scene, head3d, bank: EmbeddingBank, queries: Sequence[str] | None = None,
                workers: int = 1) -> LabelVolume:
    """Classify the scene's occupied voxels against the query embeddings (all classes by default)."""
    queries = list(bank.schema.names if queries is None else queries)
    mask = scene.labels.semantic_mask()
    labels, _ = classify_voxels(scene.feat3d, head3d, bank, queries, mask, workers)
    return scene.labels.with_labels(labels)


def novel_accuracy(pred: LabelVolume, gt: LabelVolume, schema) -> float:
    """Fraction of GT novel-class voxels predicted with their exact class."""
    g = gt.labels
    m = np.isin(g, schema.novel_ids)
    if not m.any():
        return float("nan")
    return float(np.mean(pred.labels[m] == g[m]))


__all__ = ["scene_batch", "TrainSettings", "train_on_scenes", "infer_scene", "novel_accuracy", "FusionHead"]
