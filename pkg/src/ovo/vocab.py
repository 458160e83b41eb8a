"""Category schema, prompts, text-embedding bank, teacher confidences and
open-vocabulary voxel classification."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics.functional import cosine_matrix, softmax
from .numerics.tensor import DTYPES, TensorFormatError
from .parallel import chunk_bounds, pmap
from .volumes import EMPTY, INVALID, LabelVolume, SegMap2D

DEFAULT_TEMPLATE = "a photo of {category}"
CLASSIFY_CHUNK = 32768


@dataclass(frozen=True)
class CategorySchema:
    """Semantic classes (ids 1..K in order), the novel subset, and a background entry.

    Novel classes are merged into ``unknown_id`` (K + 1) for training; the
    background embedding stands for that merged class.
    """

    names: tuple[str, ...]
    novel: frozenset[str] = frozenset()
    background: str = "background"

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "novel", frozenset(self.novel))
        if len(set(names)) != len(names):
            raise ValueError("duplicate category names")
        if not self.novel <= set(names):
            raise ValueError(f"novel classes not in schema: {sorted(self.novel - set(names))}")
        if self.background in names:
            raise ValueError("background must not also be a semantic class")
        if not names or len(names) + 1 >= INVALID:
            raise ValueError("schema must have between 1 and 253 classes")
        if not self.base_names:
            raise ValueError("schema needs at least one base class")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def unknown_id(self) -> int:
        return len(self.names) + 1

    @property
    def base_names(self) -> list[str]:
        return [n for n in self.names if n not in self.novel]

    @property
    def novel_names(self) -> list[str]:
        return [n for n in self.names if n in self.novel]

    @property
    def base_ids(self) -> list[int]:
        return [self.id_of(n) for n in self.base_names]

    @property
    def novel_ids(self) -> list[int]:
        return [self.id_of(n) for n in self.novel_names]

    def id_of(self, name: str) -> int:
        if name == self.background:
            return self.unknown_id
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise KeyError(f"unknown category {name!r}") from None

    def name_of(self, cid: int) -> str:
        if cid == self.unknown_id:
            return self.background
        return self.names[cid - 1]

    def merge_lut(self) -> np.ndarray:
        """256-entry lookup table sending novel ids to ``unknown_id``."""
        lut = np.arange(256, dtype=np.uint8)
        for cid in self.novel_ids:
            lut[cid] = self.unknown_id
        return lut

    def valid_teacher_ids(self) -> np.ndarray:
        ok = np.zeros(256, dtype=bool)
        ok[1:self.unknown_id + 1] = True
        return ok


@dataclass(frozen=True, eq=False)
class EmbeddingBank:
    """Unit-norm text embeddings; row order follows ``names``."""

    names: tuple[str, ...]
    vectors: np.ndarray
    schema: CategorySchema
    provenance: str = "ingested"

    def __post_init__(self):
        vec = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        object.__setattr__(self, "names", tuple(self.names))
        if vec.ndim != 2 or vec.shape[0] != len(self.names):
            raise ValueError("one embedding row per category required")
        if np.any(np.abs(np.linalg.norm(vec, axis=1) - 1.0) > 1e-6):
            raise ValueError("embeddings must be unit norm")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, name: str) -> np.ndarray:
        try:
            return self.vectors[self.names.index(name)]
        except ValueError:
            raise KeyError(f"no embedding for {name!r}") from None

    def subset(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(n) for n in names])

    def training_names(self) -> list[str]:
        """Base classes plus background: the only embeddings used for the voxel-text loss."""
        return self.schema.base_names + [self.schema.background]

    @classmethod
    def synthetic(cls, schema: CategorySchema, dim: int, rng: np.random.Generator) -> "EmbeddingBank":
        """Seeded random orthonormal embeddings for every class plus background."""
        names = list(schema.names) + [schema.background]
        if len(names) > dim:
            raise ValueError("cannot build more orthonormal embeddings than dimensions")
        q, r = np.linalg.qr(rng.standard_normal((dim, len(names))))
        q = q * np.sign(np.diag(r))
        return cls(tuple(names), q.T.copy(), schema, "synthetic")

    def save(self, json_path, data_name: str = "bank.bin") -> Path:
        json_path = Path(json_path)
        cats = [{"name": n, "base": n in self.schema.base_names, "background": n == self.schema.background}
                for n in self.names]
        with open(json_path.parent / data_name, "wb") as fh:
            fh.write(self.vectors.astype(DTYPES["f32"]).tobytes())
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"dim": self.dim, "categories": cats, "data": data_name,
                       "provenance": self.provenance}, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return json_path

    @classmethod
    def load(cls, json_path) -> "EmbeddingBank":
        json_path = Path(json_path)
        with open(json_path, encoding="utf-8") as fh:
            m = json.load(fh)
        cats = m["categories"]
        bg = [c["name"] for c in cats if c.get("background")]
        if len(bg) != 1:
            raise ValueError("embedding bank needs exactly one background entry")
        semantic = [c for c in cats if not c.get("background")]
        schema = CategorySchema(tuple(c["name"] for c in semantic),
                                frozenset(c["name"] for c in semantic if not c["base"]), bg[0])
        dim = int(m["dim"])
        raw = (json_path.parent / m["data"]).read_bytes()
        if len(raw) != len(cats) * dim * 4:
            raise TensorFormatError("embedding bank: payload size mismatch")
        vec = np.frombuffer(raw, dtype=DTYPES["f32"]).reshape(len(cats), dim).astype(np.float64)
        return cls(tuple(c["name"] for c in cats), vec, schema, m.get("provenance", "ingested"))


def build_prompt(category: str, template: str = DEFAULT_TEMPLATE) -> str:
    if not category or not category.strip():
        raise ValueError("empty category name")
    fields = [f for _, f, _, _ in string.Formatter().parse(template) if f is not None]
    if len(fields) != 1 or fields[0] not in ("", "category"):
        raise ValueError(f"template must contain exactly one placeholder: {template!r}")
    return template.replace("{" + fields[0] + "}", category)


def merge_novel_to_unknown(labels, schema: CategorySchema):
    """Replace every novel class id with the schema's unknown id.

    Accepts a :class:`LabelVolume` or a raw uint8 label array.
    """
    lut = schema.merge_lut()
    if isinstance(labels, LabelVolume):
        return labels.with_labels(lut[labels.labels])
    return lut[np.asarray(labels, dtype=np.uint8)]


def confidence_from_teacher(teacher_map: np.ndarray, bank: EmbeddingBank, temperature: float = 1.0,
                            names: Sequence[str] | None = None) -> SegMap2D:
    """Teacher argmax class and max softmax probability per pixel.

    ``names`` selects the bank entries to compare against (default: all of
    them). Class ids are schema ids, with background mapped to the unknown id.
    """
    names = list(bank.names if names is None else names)
    H, W, D = teacher_map.shape
    if D != bank.dim:
        raise ValueError("teacher feature dim does not match embedding dim")
    sims = cosine_matrix(teacher_map.reshape(H * W, D).astype(np.float64), bank.subset(names))
    prob = softmax(sims, temperature, axis=1)
    best = np.argmax(prob, axis=1)
    ids = np.array([bank.schema.id_of(n) for n in names], dtype=np.uint8)
    conf = prob[np.arange(H * W), best]
    return SegMap2D(ids[best].reshape(H, W), conf.reshape(H, W))


def classify_voxels(features: np.ndarray, head3d, bank: EmbeddingBank, query_names: Sequence[str],
                    mask: np.ndarray, workers: int = 1):
    """Label each masked voxel with the query whose embedding is most cosine-similar.

    Returns ``(labels uint8, scores)``; unmasked voxels get label 0 and score NaN.
    Ties go to the earliest query.
    """
    query_names = list(query_names)
    if not query_names:
        raise ValueError("empty query list")
    Q = bank.subset(query_names)
    qids = np.array([bank.schema.id_of(n) for n in query_names], dtype=np.uint8)
    mask = np.asarray(mask, dtype=bool)
    n = features.shape[0]
    labels = np.full(n, EMPTY, dtype=np.uint8)
    scores = np.full(n, np.nan)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        return labels, scores

    def run(bounds):
        lo, hi = bounds
        x = head3d(np.asarray(features[rows[lo:hi]], dtype=np.float64))
        sims = cosine_matrix(x, Q)
        best = np.argmax(sims, axis=1)
        return best, sims[np.arange(hi - lo), best]

    parts = pmap(run, chunk_bounds(rows.size, CLASSIFY_CHUNK), workers)
    best = np.concatenate([p[0] for p in parts])
    labels[rows] = qids[best]
    scores[rows] = np.concatenate([p[1] for p in parts])
    return labels, scores
