"""MLPs, single-head cross-attention and the gaze estimator.

Every parameter container exposes ``named_parameters()`` in a fixed order;
checkpoints, optimizers and hashing all rely on that order.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import diffnum as dn
from .diffnum import ShapeError, Tensor

HIDDEN = 64
ENC_WIDTH = 64


class Params:
    """Mixin for parameter containers built from dataclass fields."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=dn.DTYPE)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def clone(self):
        out = copy.deepcopy(self)
        for t in out.parameters():
            t.grad = None
        return out

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = dn.glorot_bound(fan_in, fan_out)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dn.DTYPE)


@dataclass
class MLPParams(Params):
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("MLP needs one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not chain")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input width {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def named_parameters(self, prefix=""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}w{i}", w
            yield f"{prefix}b{i}", b


def init_mlp(rng: np.random.Generator, dims: Sequence[int]) -> MLPParams:
    """Glorot-uniform weights, zero biases."""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"invalid MLP dims {list(dims)}")
    ws, bs = [], []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        ws.append(_param(glorot(rng, a, b), f"w{i}"))
        bs.append(_param(np.zeros(b, dtype=dn.DTYPE), f"b{i}"))
    return MLPParams(ws, bs)


def mlp_forward(p: MLPParams, x: Tensor) -> Tensor:
    """Affine layers over the last axis with ReLU between them (none after the last)."""
    if x.shape[-1] != p.dims[0]:
        raise ShapeError(f"mlp_forward: input width {x.shape[-1]} != expected {p.dims[0]}")
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = dn.add(_affine(h, w), b)
        if i < last:
            h = dn.relu(h)
    return h


def _affine(x: Tensor, w: Tensor) -> Tensor:
    if x.ndim == 1:
        return dn.reshape(dn.matmul(dn.reshape(x, (1, -1)), w), (w.shape[1],))
    return dn.matmul(x, w)


@dataclass
class CrossAttentionParams(Params):
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def __post_init__(self):
        d = self.w_q.shape[1]
        if d < 1 or self.w_k.shape[1] != d or self.w_v.shape[1] != d or self.w_o.shape != (d, d):
            raise ShapeError("cross-attention projections disagree on model width")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise ShapeError("key and value projections take different input widths")

    @property
    def width(self) -> int:
        return self.w_q.shape[1]

    def named_parameters(self, prefix=""):
        yield f"{prefix}w_q", self.w_q
        yield f"{prefix}w_k", self.w_k
        yield f"{prefix}w_v", self.w_v
        yield f"{prefix}w_o", self.w_o


def init_cross_attention(rng: np.random.Generator, d_q: int, d_kv: int, d: int) -> CrossAttentionParams:
    return CrossAttentionParams(
        _param(glorot(rng, d_q, d), "w_q"),
        _param(glorot(rng, d_kv, d), "w_k"),
        _param(glorot(rng, d_kv, d), "w_v"),
        _param(glorot(rng, d, d), "w_o"),
    )


def cross_attention(p: CrossAttentionParams, query_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
    """Single-head scaled dot-product attention followed by the output projection.

    Token tensors are ``(n, width)`` or batched ``(B, n, width)``.
    """
    if query_tokens.shape[-2] < 1 or kv_tokens.shape[-2] < 1:
        raise ValueError("cross_attention needs at least one query and one key token")
    if query_tokens.shape[-1] != p.w_q.shape[0]:
        raise ShapeError(f"query width {query_tokens.shape[-1]} != {p.w_q.shape[0]}")
    if kv_tokens.shape[-1] != p.w_k.shape[0]:
        raise ShapeError(f"key/value width {kv_tokens.shape[-1]} != {p.w_k.shape[0]}")
    q = dn.matmul(query_tokens, p.w_q)
    k = dn.matmul(kv_tokens, p.w_k)
    v = dn.matmul(kv_tokens, p.w_v)
    scores = dn.scale(dn.matmul(q, dn.swap_last(k)), 1.0 / math.sqrt(p.width))
    attn = dn.softmax(scores, axis=-1)
    return dn.matmul(dn.matmul(attn, v), p.w_o)


@dataclass
class GazeEstimatorParams(Params):
    encoder: MLPParams
    head: MLPParams

    def __post_init__(self):
        if self.head.dims[-1] != 2:
            raise ShapeError("gaze head must emit exactly 2 outputs (yaw, pitch)")
        if self.encoder.dims[-1] != self.head.dims[0]:
            raise ShapeError("encoder output width does not match head input")

    @property
    def in_width(self) -> int:
        return self.encoder.dims[0]

    def named_parameters(self, prefix=""):
        yield from self.encoder.named_parameters(prefix + "encoder.")
        yield from self.head.named_parameters(prefix + "head.")


def init_estimator(seed: int, in_width: int, hidden: int = HIDDEN, enc_width: int = ENC_WIDTH) -> GazeEstimatorParams:
    rng = np.random.default_rng([seed, 101])
    return GazeEstimatorParams(
        encoder=init_mlp(rng, [in_width, hidden, enc_width]),
        head=init_mlp(rng, [enc_width, hidden, 2]),
    )


def estimator_forward(p: GazeEstimatorParams, features: Tensor) -> Tensor:
    """``(B, d_x)`` features -> ``(B, 2)`` (yaw, pitch) predictions."""
    if features.ndim != 2:
        raise ShapeError(f"estimator expects (B, d_x) features, got {features.shape}")
    return mlp_forward(p.head, mlp_forward(p.encoder, features))


def predict(p: GazeEstimatorParams, features: np.ndarray) -> np.ndarray:
    """Inference-only forward pass; returns a float32 ``(B, 2)`` array."""
    with dn.no_grad():
        return estimator_forward(p, Tensor(features)).data


def init_params(seed: int, dims: Sequence[int]) -> MLPParams:
    """Deterministic MLP initialisation for arbitrary layer widths."""
    return init_mlp(np.random.default_rng(seed), dims)


__all__ = [
    "CrossAttentionParams", "GazeEstimatorParams", "MLPParams", "Params",
    "cross_attention", "estimator_forward", "init_cross_attention", "init_estimator",
    "init_mlp", "init_params", "mlp_forward", "predict",
]
