"""Seeded finite-difference checks of every loss gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import (LossOptions, LossWeights, TrainingBatch, _forward2d, _similarity_loss,
                        composite_loss, loss_pix_pix, loss_vox_pix, loss_vox_text, text_targets)
from .numerics.fusion import NUM_LEVELS, FusionHead
from .numerics.gradcheck import GradCheckReport, finite_difference_check
from .numerics.head import AlignmentHead
from .scenes import avg_pool
from .vocab import CategorySchema, EmbeddingBank

LOSSES = ("vox_pix", "vox_text", "pix_pix", "composite")


@dataclass
class GradCase:
    batch: TrainingBatch
    head3d: AlignmentHead
    head2d: FusionHead
    bank: EmbeddingBank
    weights: LossWeights


def random_case(seed: int) -> GradCase:
    """A small random configuration: a few voxels, tiny heads, a 5-level pyramid."""
    rng = np.random.default_rng([seed, 0x6C])
    schema = CategorySchema(("a", "b", "c"), frozenset({"c"}))
    D = int(rng.integers(4, 7))
    bank = EmbeddingBank.synthetic(schema, D, rng)
    N, C = int(rng.integers(3, 9)), int(rng.integers(3, 7))
    labels = rng.choice(np.array(schema.base_ids + [schema.unknown_id]), size=N).astype(np.uint8)
    H, W, C2 = int(rng.integers(2, 5)), int(rng.integers(2, 5)), 3
    level0 = rng.normal(size=(H, W, C2))
    batch = TrainingBatch(
        feat3d=rng.normal(size=(N, C)),
        teacher=rng.normal(size=(N, D)),
        confidence=rng.uniform(0.05, 1.0, size=N),
        labels=labels,
        pyramid=[avg_pool(level0, 2 ** k) for k in range(NUM_LEVELS)],
        teacher_map=rng.normal(size=(H, W, D)),
    )
    head3d = AlignmentHead.init([C, int(rng.integers(3, 7)), D], rng)
    head2d = FusionHead.init(C2, D, rng, hidden=4, scale_dim=3)
    weights = LossWeights(*rng.uniform(0.1, 2.0, size=3))
    return GradCase(batch, head3d, head2d, bank, weights)


def _closure(case: GradCase, loss: str, corrupt: bool):
    b, h3, h2 = case.batch, case.head3d, case.head2d

    def fn():
        if loss == "vox_pix":
            value, g = loss_vox_pix(b, h3)
            grads = g.grads
        elif loss == "vox_text":
            value, g = loss_vox_text(b, h3, case.bank)
            grads = g.grads
        elif loss == "pix_pix":
            value, g = loss_pix_pix(b.pyramid, b.teacher_map, h2)
            grads = g.grads
        else:
            _, value, g3, g2 = composite_loss(b, h3, h2, case.bank, case.weights, LossOptions())
            grads = g3.grads + g2.grads
        if corrupt:
            grads = [g.copy() for g in grads]
            grads[0].reshape(-1)[0] += 1e-2 * (1.0 + abs(grads[0].reshape(-1)[0]))
        return value, grads

    def value():
        parts = {}
        if loss != "pix_pix":
            x = h3(b.feat3d)
            parts["vox_pix"] = _similarity_loss(x, b.teacher, b.confidence, "cosine")[0] / b.size
            parts["vox_text"] = _similarity_loss(x, text_targets(b.labels, case.bank), np.ones(b.size),
                                                 "cosine")[0] / b.size
        if loss in ("pix_pix", "composite"):
            H, W, D = b.teacher_map.shape
            y = _forward2d(h2, b.pyramid, H, W)[0].reshape(H * W, D)
            parts["pix_pix"] = _similarity_loss(y, b.teacher_map.reshape(H * W, D), np.ones(H * W), "cosine")[0]
        if loss != "composite":
            return parts[loss]
        w = case.weights
        return w.lambda1 * parts["pix_pix"] + w.lambda2 * parts["vox_pix"] + w.lambda3 * parts["vox_text"]

    params = {"vox_pix": h3.parameters(), "vox_text": h3.parameters(),
              "pix_pix": h2.parameters()}.get(loss, h3.parameters() + h2.parameters())
    return fn, value, params


def check_seed(seed: int, h: float = 1e-6, tol: float = 1e-4, corrupt: bool = False) -> dict[str, GradCheckReport]:
    case = random_case(seed)
    out = {}
    for loss in LOSSES:
        fn, value, params = _closure(case, loss, corrupt)
        out[loss] = finite_difference_check(fn, params, h=h, tol=tol, loss_fn=value)
    return out
