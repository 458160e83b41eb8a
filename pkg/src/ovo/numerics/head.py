"""Alignment heads: stacks of affine layers with ReLU or identity activations.

Forward and backward are written out by hand. Parameter gradients are reduced
over fixed row chunks with :func:`ovo.parallel.pairwise_sum`, so the result
does not depend on how many workers processed the chunks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..parallel import chunk_bounds, pairwise_sum, pmap
from .tensor import load_tensor, save_tensor

ACTIVATIONS = ("relu", "identity")
ROW_CHUNK = 2048


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("layer weight/bias shapes disagree")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class GradientBuffer:
    """Per-parameter gradient arrays, ordered like ``head.parameters()``."""

    def __init__(self, grads: Sequence[np.ndarray]):
        self.grads = [np.asarray(g, dtype=np.float64) for g in grads]

    @classmethod
    def zeros_like(cls, head) -> "GradientBuffer":
        return cls([np.zeros_like(p) for p in head.parameters()])

    def __add__(self, other: "GradientBuffer") -> "GradientBuffer":
        return GradientBuffer([a + b for a, b in zip(self.grads, other.grads)])

    def scale(self, s: float) -> "GradientBuffer":
        return GradientBuffer([s * g for g in self.grads])

    def zero_(self) -> None:
        for g in self.grads:
            g[...] = 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads]) if self.grads else np.zeros(0)

    def __iter__(self):
        return iter(self.grads)

    def __len__(self):
        return len(self.grads)


class AlignmentHead:
    """Row-wise MLP mapping backbone features into the teacher embedding space."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ValueError("a head needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = layers

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, hidden_activation="relu",
             final_activation="identity") -> "AlignmentHead":
        """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
        layers = []
        for k, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(din)
            W = rng.uniform(-bound, bound, size=(dout, din))
            b = rng.uniform(-bound, bound, size=dout)
            act = final_activation if k == len(dims) - 2 else hidden_activation
            layers.append(Layer(W, b, act))
        return cls(layers)

    @classmethod
    def identity(cls, dim: int) -> "AlignmentHead":
        return cls([Layer(np.eye(dim), np.zeros(dim), "identity")])

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [l.out_dim for l in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def copy(self) -> "AlignmentHead":
        return AlignmentHead([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError("head/input dimension mismatch")
        acts = [x]
        pres = []
        h = x
        for l in self.layers:
            z = h @ l.weight.T + l.bias
            pres.append(z)
            h = np.maximum(z, 0.0) if l.activation == "relu" else z
            acts.append(h)
        return h, (acts, pres)

    def __call__(self, x):
        return self.forward(x)[0]

    def _backward_rows(self, acts, pres, gy, lo, hi, input_grad=True):
        grads = []
        g = gy[lo:hi]
        for k in range(len(self.layers) - 1, -1, -1):
            l = self.layers[k]
            if l.activation == "relu":
                # subgradient at 0 is 0
                g = g * (pres[k][lo:hi] > 0)
            grads.append(g.sum(axis=0))
            grads.append(g.T @ acts[k][lo:hi])
            g = g @ l.weight if (k > 0 or input_grad) else None
        grads.reverse()
        # grads now alternate (W, b) per layer
        return GradientBuffer(grads), g

    def backward(self, cache, gy: np.ndarray, workers: int = 1, input_grad: bool = True):
        """Returns ``(GradientBuffer, grad_input)`` for upstream gradient ``gy``.

        With ``input_grad=False`` the input gradient is skipped and returned as None.
        """
        acts, pres = cache
        gy = np.asarray(gy, dtype=np.float64)
        if gy.shape != acts[-1].shape:
            raise ValueError("upstream gradient shape does not match head output")
        bounds = chunk_bounds(gy.shape[0], ROW_CHUNK) or [(0, 0)]
        parts = pmap(lambda b: self._backward_rows(acts, pres, gy, *b, input_grad), bounds, workers)
        buf = pairwise_sum([p[0] for p in parts])
        gx = np.concatenate([p[1] for p in parts], axis=0) if input_grad else None
        return buf, gx

    def to_manifest(self) -> dict:
        return {
            "kind": "mlp",
            "dims": self.dims,
            "activations": [l.activation for l in self.layers],
        }

    def save(self, directory, prefix: str) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = self.to_manifest()
        manifest["layers"] = []
        for k, l in enumerate(self.layers):
            wname, bname = f"{prefix}_l{k}_weight", f"{prefix}_l{k}_bias"
            save_tensor(directory / f"{wname}.json", l.weight)
            save_tensor(directory / f"{bname}.json", l.bias)
            manifest["layers"].append({"weight": f"{wname}.json", "bias": f"{bname}.json",
                                       "activation": l.activation})
        path = directory / f"{prefix}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "AlignmentHead":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            m = json.load(fh)
        layers = []
        for entry in m["layers"]:
            W = load_tensor(path.parent / entry["weight"]).astype(np.float64)
            b = load_tensor(path.parent / entry["bias"]).astype(np.float64)
            layers.append(Layer(W, b, entry["activation"]))
        return cls(layers)


def head_forward(head: AlignmentHead, features) -> np.ndarray:
    return head.forward(features)[0]


def head_backward(head: AlignmentHead, features, upstream_grad, workers: int = 1):
    _, cache = head.forward(features)
    return head.backward(cache, upstream_grad, workers=workers)
