"""Multi-scale 2D fusion head.

Five pyramid levels (strides 1, 2, 4, 8, 16) are each mapped per pixel to 128
channels, bilinearly upsampled to the target resolution (corner-aligned), and
concatenated to 640 channels. Two per-pixel affine stages then map to the
teacher dimension: ``640 -> hidden`` with ReLU, ``hidden -> out`` linear.
"""
from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .head import AlignmentHead, GradientBuffer

NUM_LEVELS = 5
SCALE_DIM = 128


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) corner-aligned linear interpolation weights along one axis (read-only)."""
    return _bilinear(int(n_in), int(n_out))


@lru_cache(maxsize=256)
def _bilinear(n_in: int, n_out: int) -> np.ndarray:
    M = _bilinear_build(n_in, n_out)
    M.flags.writeable = False
    return M


def _bilinear_build(n_in, n_out):
    M = np.zeros((n_out, n_in))
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    if n_out == 1:
        M[0, 0] = 1.0
        return M
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    M[np.arange(n_out), lo] = 1.0 - frac
    M[np.arange(n_out), lo + 1] += frac
    return M


def upsample(x: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear resize of an (h, w, C) map to (H, W, C), corner-aligned."""
    return _resize(np.asarray(x, dtype=np.float64), bilinear_matrix(x.shape[0], H), bilinear_matrix(x.shape[1], W))


def _resize(x, Ry, Rx):
    h, w, c = x.shape
    rows = (Ry @ x.reshape(h, w * c)).reshape(Ry.shape[0], w, c)
    return np.matmul(Rx, rows)


def _resize_adjoint(g, Ry, Rx):
    H, W, c = g.shape
    cols = np.matmul(Rx.T, g)  # (H, w, c)
    w = cols.shape[1]
    return (Ry.T @ cols.reshape(H, w * c)).reshape(Ry.shape[1], w, c)


class FusionHead:
    def __init__(self, scale_heads: Sequence[AlignmentHead], mixer: AlignmentHead):
        scale_heads = list(scale_heads)
        if len(scale_heads) != NUM_LEVELS:
            raise ValueError(f"fusion head needs {NUM_LEVELS} scale maps")
        cat = sum(h.output_dim for h in scale_heads)
        if mixer.input_dim != cat:
            raise ValueError("mixer input does not match concatenated width")
        self.scale_heads = scale_heads
        self.mixer = mixer

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int = 512,
             scale_dim: int = SCALE_DIM) -> "FusionHead":
        scales = [AlignmentHead.init([in_dim, scale_dim], rng) for _ in range(NUM_LEVELS)]
        mixer = AlignmentHead.init([NUM_LEVELS * scale_dim, hidden, out_dim], rng)
        return cls(scales, mixer)

    @property
    def input_dim(self) -> int:
        return self.scale_heads[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.mixer.output_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for h in self.scale_heads:
            out += h.parameters()
        return out + self.mixer.parameters()

    def copy(self) -> "FusionHead":
        return FusionHead([h.copy() for h in self.scale_heads], self.mixer.copy())

    def _check(self, pyramid):
        if len(pyramid) != NUM_LEVELS:
            raise ValueError(f"expected {NUM_LEVELS} pyramid levels, got {len(pyramid)}")
        for lvl in pyramid:
            if lvl.ndim != 3 or lvl.shape[2] != self.input_dim:
                raise ValueError("pyramid level channel dim does not match fusion head")

    def forward(self, pyramid: Sequence[np.ndarray], H: int, W: int):
        pyramid = [np.asarray(p, dtype=np.float64) for p in pyramid]
        self._check(pyramid)
        ups, caches, mats = [], [], []
        for lvl, head in zip(pyramid, self.scale_heads):
            h, w, c = lvl.shape
            y, cache = head.forward(lvl.reshape(h * w, c))
            Ry, Rx = bilinear_matrix(h, H), bilinear_matrix(w, W)
            ups.append(_resize(y.reshape(h, w, -1), Ry, Rx))
            caches.append(cache)
            mats.append((Ry, Rx, h, w))
        cat = np.concatenate(ups, axis=2).reshape(H * W, -1)
        out, mcache = self.mixer.forward(cat)
        return out.reshape(H, W, -1), (caches, mats, mcache, H, W)

    def __call__(self, pyramid, H, W):
        return self.forward(pyramid, H, W)[0]

    def backward(self, cache, gy: np.ndarray, workers: int = 1):
        """Returns ``(GradientBuffer, levels)``; level input gradients are not needed and come back as None."""
        caches, mats, mcache, H, W = cache
        gy = np.asarray(gy, dtype=np.float64).reshape(H * W, -1)
        mbuf, gcat = self.mixer.backward(mcache, gy, workers=workers)
        gcat = gcat.reshape(H, W, -1)
        grads, glevels = [], []
        off = 0
        for head, c, (Ry, Rx, h, w) in zip(self.scale_heads, caches, mats):
            d = head.output_dim
            gup = gcat[:, :, off:off + d]
            off += d
            gsmall = _resize_adjoint(gup, Ry, Rx).reshape(h * w, d)
            buf, gx = head.backward(c, gsmall, workers=workers, input_grad=False)
            grads += buf.grads
            glevels.append(gx)
        return GradientBuffer(grads + mbuf.grads), glevels

    def save(self, directory, prefix: str = "head2d") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        parts = [h.save(directory, f"{prefix}_scale{k}").name for k, h in enumerate(self.scale_heads)]
        mixer = self.mixer.save(directory, f"{prefix}_mixer").name
        path = directory / f"{prefix}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"kind": "fusion", "scales": parts, "mixer": mixer}, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "FusionHead":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            m = json.load(fh)
        return cls([AlignmentHead.load(path.parent / s) for s in m["scales"]],
                   AlignmentHead.load(path.parent / m["mixer"]))


def multiscale_fuse_forward(head: FusionHead, feature_pyramid, H: int, W: int) -> np.ndarray:
    return head.forward(feature_pyramid, H, W)[0]
