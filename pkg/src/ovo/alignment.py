"""Distillation losses, their weighted total, and the head training loop.

Similarity defaults to cosine of the raw vectors; ``similarity="dot"`` uses the
plain inner product instead.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics.functional import weighted_cosine_loss
from .numerics.fusion import FusionHead
from .numerics.head import AlignmentHead, GradientBuffer
from .parallel import pairwise_sum
from .vocab import EmbeddingBank

log = logging.getLogger(__name__)

SIMILARITIES = ("cosine", "dot")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1  # pixel-to-pixel
    lambda2: float = 1.0  # voxel-to-pixel
    lambda3: float = 1.0  # voxel-to-text

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainingBatch:
    """Operands of the three losses for one scene.

    ``feat3d``, ``teacher``, ``confidence`` and ``labels`` hold one row per
    valid voxel; ``labels`` are training ids (base ids or the unknown id).
    ``pyramid``/``teacher_map`` feed the pixel-to-pixel loss and may be None.
    """

    feat3d: np.ndarray
    teacher: np.ndarray
    confidence: np.ndarray
    labels: np.ndarray
    pyramid: list[np.ndarray] | None = None
    teacher_map: np.ndarray | None = None
    name: str = "scene"

    def __post_init__(self):
        n = self.feat3d.shape[0]
        if not (self.teacher.shape[0] == self.confidence.shape[0] == self.labels.shape[0] == n):
            raise ValueError("batch row counts disagree")

    @property
    def size(self) -> int:
        return int(self.feat3d.shape[0])

    @classmethod
    def from_selection(cls, corr, feat3d, labels, teacher_map, schema, pyramid=None,
                       name: str = "scene") -> "TrainingBatch":
        """Gather per-voxel rows for the valid set of a correspondence set."""
        v = corr.valid_subset()
        lut = schema.merge_lut()
        return cls(
            feat3d=np.asarray(feat3d[v.voxel], dtype=np.float64),
            teacher=np.asarray(teacher_map[v.pixel_j, v.pixel_i], dtype=np.float64),
            confidence=np.asarray(v.confidence, dtype=np.float64),
            labels=lut[np.asarray(labels)[v.voxel]],
            pyramid=None if pyramid is None else [np.asarray(p, dtype=np.float64) for p in pyramid],
            teacher_map=None if teacher_map is None else np.asarray(teacher_map, dtype=np.float64),
            name=name,
        )


def _similarity_loss(x, targets, weights, similarity):
    """sum_i w_i * (1 - sim(x_i, t_i)) and its gradient w.r.t. x."""
    if similarity == "cosine":
        return weighted_cosine_loss(x, targets, weights)
    if similarity == "dot":
        dots = np.einsum("ij,ij->i", x, targets)
        return float(np.sum(weights * (1.0 - dots))), -weights[:, None] * targets
    raise ValueError(f"unknown similarity {similarity!r}")


def text_targets(labels: np.ndarray, bank: EmbeddingBank) -> np.ndarray:
    schema = bank.schema
    allowed = set(schema.base_ids) | {schema.unknown_id}
    labels = np.asarray(labels, dtype=np.int64)
    table = np.zeros((schema.unknown_id + 1, bank.dim))
    for cid in np.unique(labels):
        if int(cid) not in allowed:
            raise KeyError(f"training label {int(cid)} is neither a base class nor background")
        table[cid] = bank.vector(schema.name_of(int(cid)))
    return table[labels]


def _check_nonempty(batch):
    if batch.size == 0:
        raise ValueError("no valid voxels")


def _vox_pix_terms(batch, x, reweight, similarity):
    w = batch.confidence if reweight else np.ones(batch.size)
    loss, gx = _similarity_loss(x, batch.teacher, w, similarity)
    n = batch.size
    return loss / n, gx / n


def _vox_text_terms(batch, x, bank, similarity):
    loss, gx = _similarity_loss(x, text_targets(batch.labels, bank), np.ones(batch.size), similarity)
    n = batch.size
    return loss / n, gx / n


def loss_vox_pix(batch: TrainingBatch, head3d: AlignmentHead, reweight: bool = True,
                 similarity: str = "cosine", workers: int = 1):
    """Confidence-weighted mean of (1 - sim) between aligned voxel and teacher pixel features."""
    _check_nonempty(batch)
    x, cache = head3d.forward(batch.feat3d)
    loss, gx = _vox_pix_terms(batch, x, reweight, similarity)
    return loss, head3d.backward(cache, gx, workers, input_grad=False)[0]


def loss_vox_text(batch: TrainingBatch, head3d: AlignmentHead, bank: EmbeddingBank,
                  similarity: str = "cosine", workers: int = 1):
    """Mean of (1 - sim) between aligned voxel features and their label's text embedding."""
    _check_nonempty(batch)
    x, cache = head3d.forward(batch.feat3d)
    loss, gx = _vox_text_terms(batch, x, bank, similarity)
    return loss, head3d.backward(cache, gx, workers, input_grad=False)[0]


def _forward2d(head2d, student, H, W):
    if isinstance(head2d, FusionHead):
        return head2d.forward(student, H, W)
    student = np.asarray(student, dtype=np.float64)
    if student.shape[:2] != (H, W):
        raise ValueError("student and teacher maps must share H x W")
    y, cache = head2d.forward(student.reshape(H * W, -1))
    return y.reshape(H, W, -1), cache


def _backward2d(head2d, cache, gy, workers):
    if isinstance(head2d, FusionHead):
        return head2d.backward(cache, gy, workers)[0]
    return head2d.backward(cache, gy.reshape(-1, gy.shape[-1]), workers)[0]


def loss_pix_pix(student, teacher_map: np.ndarray, head2d, mean: bool = False,
                 similarity: str = "cosine", workers: int = 1):
    """Sum over pixels of (1 - sim) between aligned student and teacher features.

    ``student`` is a feature pyramid for a :class:`FusionHead` or an (H, W, C)
    map for a per-pixel :class:`AlignmentHead`. ``mean=True`` divides by H*W.
    """
    teacher_map = np.asarray(teacher_map, dtype=np.float64)
    H, W, D = teacher_map.shape
    if head2d.output_dim != D:
        raise ValueError("2D head output does not match teacher channels")
    y, cache = _forward2d(head2d, student, H, W)
    loss, gy = _similarity_loss(y.reshape(H * W, D), teacher_map.reshape(H * W, D), np.ones(H * W), similarity)
    if mean:
        loss, gy = loss / (H * W), gy / (H * W)
    return loss, _backward2d(head2d, cache, gy.reshape(H, W, D), workers)


def total_loss(l_pix_pix: float, l_vox_pix: float, l_vox_text: float, weights: LossWeights = LossWeights()) -> float:
    return weights.lambda1 * l_pix_pix + weights.lambda2 * l_vox_pix + weights.lambda3 * l_vox_text


@dataclass(frozen=True)
class LossOptions:
    reweight: bool = True
    similarity: str = "cosine"
    pix_mean: bool = False


def composite_loss(batch: TrainingBatch, head3d, head2d, bank, weights=LossWeights(),
                   options: LossOptions = LossOptions(), workers: int = 1):
    """Weighted total for one scene with gradients for both heads.

    Returns ``(components, total, grad3d, grad2d)``; components maps
    ``l_pix_pix``, ``l_vox_pix``, ``l_vox_text`` to floats (NaN when skipped).
    """
    comps = {"l_pix_pix": np.nan, "l_vox_pix": np.nan, "l_vox_text": np.nan}
    g3 = GradientBuffer.zeros_like(head3d)
    g2 = GradientBuffer.zeros_like(head2d) if head2d is not None else None
    total = 0.0
    if batch.size > 0:
        x, cache = head3d.forward(batch.feat3d)
        l2, gx2 = _vox_pix_terms(batch, x, options.reweight, options.similarity)
        l3, gx3 = _vox_text_terms(batch, x, bank, options.similarity)
        comps["l_vox_pix"], comps["l_vox_text"] = l2, l3
        total += weights.lambda2 * l2 + weights.lambda3 * l3
        g3 = head3d.backward(cache, weights.lambda2 * gx2 + weights.lambda3 * gx3, workers, input_grad=False)[0]
    else:
        log.warning("scene %s has no valid voxels; skipping voxel losses", batch.name)
    if head2d is not None and batch.pyramid is not None and batch.teacher_map is not None:
        student = batch.pyramid if isinstance(head2d, FusionHead) else batch.pyramid[0]
        l1, g = loss_pix_pix(student, batch.teacher_map, head2d, options.pix_mean, options.similarity, workers)
        comps["l_pix_pix"] = l1
        total += weights.lambda1 * l1
        g2 = g.scale(weights.lambda1)
    return comps, total, g3, g2


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamW:
    """Adaptive moments with decoupled weight decay; updates parameters in place."""

    def __init__(self, params: Sequence[np.ndarray], config: OptimizerConfig = OptimizerConfig()):
        self.params = list(params)
        self.config = config
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        c = self.config
        self.step_count += 1
        bc1 = 1.0 - c.beta1 ** self.step_count
        bc2 = 1.0 - c.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p *= 1.0 - c.lr * c.weight_decay
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def init_heads(feat_dim: int, student_dim: int | None, embed_dim: int, seed: int,
               hidden3d: Sequence[int] = (), fusion_hidden: int = 512):
    """Seeded heads: MLP ``feat_dim -> *hidden3d -> embed_dim`` and a fusion head (or None)."""
    rng = np.random.default_rng([seed, 0x0D15])
    head3d = AlignmentHead.init([feat_dim, *hidden3d, embed_dim], rng)
    head2d = None
    if student_dim is not None:
        head2d = FusionHead.init(student_dim, embed_dim, rng, hidden=fusion_hidden)
    return head3d, head2d


LOG_COLUMNS = ("epoch", "l_pix_pix", "l_vox_pix", "l_vox_text", "total")


@dataclass
class TrainResult:
    head3d: AlignmentHead
    head2d: FusionHead | AlignmentHead | None
    log: list[dict] = field(default_factory=list)

    def log_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for row in self.log:
            lines.append(",".join([str(row["epoch"])] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"


def _mean(values):
    vals = [v for v in values if not np.isnan(v)]
    return float(pairwise_sum(vals) / len(vals)) if vals else 0.0


def train(batches: Sequence[TrainingBatch], head3d: AlignmentHead, head2d, bank: EmbeddingBank,
          weights: LossWeights = LossWeights(), optimizer: OptimizerConfig = OptimizerConfig(),
          epochs: int = 1, seed: int = 0, options: LossOptions = LossOptions(), workers: int = 1,
          progress=None) -> TrainResult:
    """Train both heads in place, one optimizer step per scene.

    Scene order is reshuffled every epoch from ``seed``. Each log row holds the
    mean over scenes of the pre-update losses.
    """
    if not batches:
        raise ValueError("need at least one scene")
    rng = np.random.default_rng([seed, 0x5CE7E])
    opt3 = AdamW(head3d.parameters(), optimizer)
    opt2 = AdamW(head2d.parameters(), optimizer) if head2d is not None else None
    result = TrainResult(head3d, head2d)
    n = len(batches)
    for epoch in range(epochs):
        per = np.full((n, 4), np.nan)
        for k in rng.permutation(n):
            b = batches[k]
            comps, total, g3, g2 = composite_loss(b, head3d, head2d, bank, weights, options, workers)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss in scene {b.name} at epoch {epoch}")
            per[k] = [comps["l_pix_pix"], comps["l_vox_pix"], comps["l_vox_text"], total]
            opt3.step(g3.grads)
            if opt2 is not None and g2 is not None:
                opt2.step(g2.grads)
        row = {"epoch": epoch}
        for j, key in enumerate(LOG_COLUMNS[1:]):
            row[key] = _mean(per[:, j])
        result.log.append(row)
        if progress is not None:
            progress(row)
    return result
