"""Nested three-rung MLP family with exact gradients and cross-rung projection.

Rung ``r`` is the leading sub-block of rung ``r + 1`` in every weight matrix
and bias, so the coordinates of a smaller model are a subset of the flat
parameter vector of the largest one.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

RUNG_NAMES = ("simple", "medium", "complex")


class Direction(enum.Enum):
    UP = "UP"
    DOWN = "DOWN"
    HOLD = "HOLD"


@dataclass(frozen=True)
class ModelArch:
    rung: int
    layer_widths: tuple  # (input, hidden..., output)

    @property
    def name(self) -> str:
        return RUNG_NAMES[self.rung]

    def layers(self):
        return list(zip(self.layer_widths[:-1], self.layer_widths[1:]))


def param_count(arch: ModelArch) -> int:
    return sum(o * i + o for i, o in arch.layers())


@dataclass
class ParamVector:
    values: np.ndarray
    rung: int


class NestedModelFamily:
    """Three nested architectures and their coordinate maps into rung 2."""

    def __init__(self, input_dim: int, output_dim: int, hidden: Sequence[Sequence[int]]):
        if len(hidden) != 3:
            raise ValueError("need exactly three hidden-width lists (simple, medium, complex)")
        hidden = [tuple(int(w) for w in h) for h in hidden]
        depth = {len(h) for h in hidden}
        if len(depth) != 1:
            raise ValueError(f"all rungs need the same number of hidden layers, got {hidden}")
        for small, large in zip(hidden, hidden[1:]):
            if any(a > b for a, b in zip(small, large)):
                raise ValueError(f"hidden widths are not nested: {small} vs {large}")
        if any(w < 1 for h in hidden for w in h) or input_dim < 1 or output_dim < 1:
            raise ValueError("all widths must be >= 1")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = hidden
        self.archs = [ModelArch(r, (input_dim, *h, output_dim)) for r, h in enumerate(hidden)]
        self.coord_maps = [self._coord_map(arch) for arch in self.archs]

    def _coord_map(self, arch: ModelArch) -> np.ndarray:
        idx, offset = [], 0
        for (fi, fo), (i, o) in zip(self.archs[2].layers(), arch.layers()):
            rows = np.arange(o)[:, None] * fi + np.arange(i)[None, :]
            idx.append(offset + rows.ravel())
            offset += fo * fi
            idx.append(offset + np.arange(o))
            offset += fo
        return np.concatenate(idx)

    def param_count(self, rung: int) -> int:
        return param_count(self.archs[rung])

    def __repr__(self):
        return f"NestedModelFamily({self.input_dim}, {self.output_dim}, {self.hidden})"


def build_family(input_dim: int, output_dim: int, widths: Sequence[Sequence[int]]) -> NestedModelFamily:
    return NestedModelFamily(input_dim, output_dim, widths)


def init_params(family: NestedModelFamily, seed: int) -> np.ndarray:
    """He-normal weights, zero biases, for the full (rung 2) model, in float32."""
    rng = np.random.default_rng(seed)
    parts = []
    for i, o in family.archs[2].layers():
        parts.append(rng.normal(0.0, np.sqrt(2.0 / i), size=o * i))
        parts.append(np.zeros(o))
    return np.concatenate(parts).astype(np.float32)


def _unpack(arch: ModelArch, params: np.ndarray):
    params = np.asarray(params)
    if params.shape != (param_count(arch),):
        raise ValueError(f"{arch.name} expects {param_count(arch)} parameters, got {params.shape}")
    layers, offset = [], 0
    for i, o in arch.layers():
        W = params[offset:offset + o * i].reshape(o, i)
        offset += o * i
        layers.append((W, params[offset:offset + o]))
        offset += o
    return layers


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(arch, X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[1] != arch.layer_widths[0]:
        raise ValueError(f"inputs must be (n, {arch.layer_widths[0]}), got {X.shape}")
    if len(X) == 0 or len(y) != len(X):
        raise ValueError("batch must be non-empty with one label per row")
    return X, y


def _forward_cache(arch, params, X):
    layers = _unpack(arch, params)
    acts, pre = [X], []
    for depth, (W, b) in enumerate(layers):
        z = acts[-1] @ W.T + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if depth < len(layers) - 1 else z)
    return layers, acts, pre


def _cross_entropy(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(len(y)), y]))


def forward(arch: ModelArch, params: np.ndarray, X, y):
    """Return (logits, mean cross-entropy loss)."""
    X, y = _check_batch(arch, X, y)
    _, acts, _ = _forward_cache(arch, params, X)
    logits = acts[-1]
    return logits, _cross_entropy(logits, y)


def predict_proba(arch: ModelArch, params: np.ndarray, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    _, acts, _ = _forward_cache(arch, params, X)
    return _softmax(acts[-1])


def loss_and_grad(arch: ModelArch, params: np.ndarray, X, y):
    X, y = _check_batch(arch, X, y)
    layers, acts, pre = _forward_cache(arch, params, X)
    n = len(y)
    loss = _cross_entropy(acts[-1], y)
    delta = _softmax(acts[-1])
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    for depth in range(len(layers) - 1, -1, -1):
        W, _ = layers[depth]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ acts[depth]).ravel())
        if depth:
            delta = (delta @ W) * (pre[depth - 1] > 0)
    return loss, np.concatenate(grads[::-1])


def backward(arch: ModelArch, params: np.ndarray, X, y) -> np.ndarray:
    return loss_and_grad(arch, params, X, y)[1]


def normalized_demand(family: NestedModelFamily, rung: int) -> float:
    return family.param_count(rung) / family.param_count(2)


def utility(family: NestedModelFamily, rung: int, device_score: float, acc_estimate: float,
            alpha: float = 0.9, beta: float = 0.6) -> float:
    """alpha * accuracy + beta * min(1, capacity / demand)."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    efficiency = min(1.0, device_score / normalized_demand(family, rung))
    return alpha * acc_estimate + beta * efficiency


def adjust_complexity(rung: int, direction: Direction) -> int:
    if direction is Direction.UP:
        return min(rung + 1, 2)
    if direction is Direction.DOWN:
        return max(rung - 1, 0)
    return rung


def project_params(family: NestedModelFamily, from_rung: int, to_rung: int, local: np.ndarray,
                   global_params: np.ndarray | None = None) -> np.ndarray:
    """Move a parameter vector between rungs.

    Shared coordinates keep the local values; coordinates new to ``to_rung``
    come from the global model (zeros when there is none yet).
    """
    if from_rung == to_rung:
        return np.array(local, copy=True)
    full = (np.zeros(family.param_count(2), dtype=np.asarray(local).dtype) if global_params is None
            else np.array(global_params, dtype=np.asarray(local).dtype, copy=True))
    full[family.coord_maps[from_rung]] = local
    return full[family.coord_maps[to_rung]]


_HEADER = struct.Struct("<BI")


def serialize_params(vector: ParamVector) -> bytes:
    """Rung tag byte, little-endian uint32 length, little-endian float32 values."""
    values = np.asarray(vector.values, dtype="<f4")
    return _HEADER.pack(vector.rung, len(values)) + values.tobytes()


def deserialize_params(blob: bytes, offset: int = 0) -> tuple[ParamVector, int]:
    """Parse one vector starting at ``offset``; returns it and the next offset."""
    if len(blob) - offset < _HEADER.size:
        raise ValueError("truncated parameter vector header")
    rung, length = _HEADER.unpack_from(blob, offset)
    start = offset + _HEADER.size
    end = start + 4 * length
    if end > len(blob):
        raise ValueError("truncated parameter vector payload")
    values = np.frombuffer(blob[start:end], dtype="<f4").astype(np.float32)
    return ParamVector(values, rung), end
