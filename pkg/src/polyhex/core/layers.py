"""Attention, normalization and MLP building blocks on top of the tape."""

from __future__ import annotations

import contextlib
import math
from typing import Callable

import numpy as np

from . import tensor as T
from .params import ParameterStore
from .tensor import Tensor

# Above this many score entries per call, heads are evaluated one at a time
# to bound peak memory.
HEAD_LOOP_THRESHOLD = 1 << 24

_weight_probes: list[Callable[[np.ndarray], None]] = []


@contextlib.contextmanager
def attention_probe(fn: Callable[[np.ndarray], None]):
    """Call ``fn(weights)`` with every post-softmax weight array inside the block."""
    _weight_probes.append(fn)
    try:
        yield
    finally:
        _weight_probes.remove(fn)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = T.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return T.reshape(x, (*lead, n, h * dh))


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, heads: int) -> Tensor:
    """Multi-head softmax(QK^T / sqrt(d_head)) V over the last two axes.

    Q is ``[..., q, d]``, K and V are ``[..., k, d]``; heads are split
    along ``d`` and concatenated back.
    """
    d = Q.shape[-1]
    if K.shape[-1] != d or V.shape[-1] != d:
        raise ValueError(f"attention width mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"key/value count mismatch: K {K.shape}, V {V.shape}")
    if K.shape[-2] == 0:
        raise ValueError("attention needs at least one key")
    if heads < 1 or d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    inv = 1.0 / math.sqrt(dh)
    batch = int(np.prod(Q.shape[:-2])) if Q.ndim > 2 else 1
    if batch * heads * Q.shape[-2] * K.shape[-2] <= HEAD_LOOP_THRESHOLD:
        q, k, v = _split_heads(Q, heads), _split_heads(K, heads), _split_heads(V, heads)
        kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        w = T.softmax(T.scale(T.matmul(q, kt), inv), axis=-1)
        for probe in _weight_probes:
            probe(w.data)
        return _merge_heads(T.matmul(w, v))
    outs = []
    for h in range(heads):
        sl = (Ellipsis, slice(h * dh, (h + 1) * dh))
        q, k, v = Q[sl], K[sl], V[sl]
        kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
        w = T.softmax(T.scale(T.matmul(q, kt), inv), axis=-1)
        for probe in _weight_probes:
            probe(w.data)
        outs.append(T.matmul(w, v))
    return T.concat(outs, axis=-1)


def linear(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def init_linear(params: ParameterStore, name: str, d_in: int, d_out: int,
                rng: np.random.Generator, zero: bool = False, std: float = 0.02) -> None:
    if zero:
        params.zeros(f"{name}.weight", (d_in, d_out))
    else:
        params.normal(f"{name}.weight", (d_in, d_out), rng, std)
    params.zeros(f"{name}.bias", (d_out,))


def init_layer_norm(params: ParameterStore, name: str, d: int) -> None:
    params.ones(f"{name}.gain", (d,))
    params.zeros(f"{name}.bias", (d,))


def norm(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    return T.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def feed_forward(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    """Affine -> GELU -> affine; hidden width is set by the stored weights."""
    return linear(T.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def init_feed_forward(params: ParameterStore, name: str, d: int, hidden_mult: int,
                      rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.fc1", d, hidden_mult * d, rng)
    init_linear(params, f"{name}.fc2", hidden_mult * d, d, rng)


def multi_head_attention(xq: Tensor, xkv: Tensor, params: ParameterStore, name: str,
                         heads: int) -> Tensor:
    """Projected attention: queries from ``xq``, keys/values from ``xkv``."""
    q = linear(xq, params, f"{name}.q")
    k = linear(xkv, params, f"{name}.k")
    v = linear(xkv, params, f"{name}.v")
    return linear(scaled_dot_attention(q, k, v, heads), params, f"{name}.o")


def init_attention(params: ParameterStore, name: str, d: int, rng: np.random.Generator,
                   zero_out: bool = False) -> None:
    for p in "qkv":
        init_linear(params, f"{name}.{p}", d, d, rng)
    init_linear(params, f"{name}.o", d, d, rng, zero=zero_out)
