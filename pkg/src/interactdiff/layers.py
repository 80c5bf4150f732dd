"""Small parameterized layer helpers over the tensor core.

Each helper registers its weights into a shared ParameterStore under a
caller-chosen name prefix, so freezing and checkpointing work by prefix.
"""

from __future__ import annotations

import numpy as np

from . import numerics as N
from .numerics import ParameterStore, Tensor


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, rng, bias: bool = True):
        self.name = name
        self.store = store
        scale = 1.0 / np.sqrt(d_in)
        store.add(f"{name}.w", Tensor(rng.normal(0.0, scale, size=(d_in, d_out))))
        self.bias = bias
        if bias:
            store.add(f"{name}.b", Tensor(np.zeros(d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.store[f"{self.name}.w"]
        if self.bias:
            out = out + self.store[f"{self.name}.b"]
        return out


class Conv2d:
    def __init__(self, store, name, c_in, c_out, k=3, stride=1, rng=None, zero_init=False):
        self.name = name
        self.store = store
        self.stride = stride
        self.padding = k // 2
        if zero_init:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(c_in * k * k), size=(c_out, c_in, k, k))
        store.add(f"{name}.w", Tensor(w))
        store.add(f"{name}.b", Tensor(np.zeros(c_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return N.conv2d(
            x,
            self.store[f"{self.name}.w"],
            self.store[f"{self.name}.b"],
            stride=self.stride,
            padding=self.padding,
        )


class GroupNorm:
    """Composed from primitive ops; gradient comes from the tape."""

    def __init__(self, store, name, channels, groups=None, eps=1e-5):
        self.name = name
        self.store = store
        self.groups = groups or max(1, min(8, channels // 4))
        assert channels % self.groups == 0
        self.channels = channels
        self.eps = eps
        store.add(f"{name}.gain", Tensor(np.ones(channels)))
        store.add(f"{name}.bias", Tensor(np.zeros(channels)))

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        g = self.groups
        xg = x.reshape(B, g, (C // g) * H * W)
        mu = xg.mean(axis=-1, keepdims=True)
        cen = xg - mu
        var = (cen * cen).mean(axis=-1, keepdims=True)
        norm = cen * ((var + self.eps) ** -0.5)
        norm = norm.reshape(B, C, H, W)
        gain = self.store[f"{self.name}.gain"].reshape(1, C, 1, 1)
        bias = self.store[f"{self.name}.bias"].reshape(1, C, 1, 1)
        return norm * gain + bias


class LayerNorm:
    def __init__(self, store, name, dim, eps=1e-5):
        self.name = name
        self.store = store
        self.eps = eps
        store.add(f"{name}.gain", Tensor(np.ones(dim)))
        store.add(f"{name}.bias", Tensor(np.zeros(dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return N.layer_norm(
            x, self.store[f"{self.name}.gain"], self.store[f"{self.name}.bias"], eps=self.eps
        )


NEG_MASK = -1e30  # additive mask; exp underflows to exactly 0 after max-shift


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    key_mask: np.ndarray | None = None,
    logit_bias: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product attention.

    q: (B, Sq, D); k, v: (B, Sk, D); key_mask: boolean (B, Sk), True = valid.
    logit_bias: optional additive pre-softmax bias, broadcastable to (Sk,).
    Returns (B, Sq, D).
    """
    B, Sq, D = q.shape
    Sk = k.shape[1]
    dh = D // n_heads

    def split(x, S):
        return N.swapaxes(x.reshape(B, S, n_heads, dh), 1, 2)  # (B, H, S, dh)

    qh, kh, vh = split(q, Sq), split(k, Sk), split(v, Sk)
    scores = (qh @ N.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    if logit_bias is not None:
        scores = scores + logit_bias
    if key_mask is not None:
        add = np.where(key_mask, 0.0, NEG_MASK)[:, None, None, :]
        scores = scores + Tensor(add)
    attn = N.softmax(scores, axis=-1)
    out = attn @ vh  # (B, H, Sq, dh)
    return N.swapaxes(out, 1, 2).reshape(B, Sq, D)


class AttentionLayer:
    """Multi-head attention with learned q/k/v/out projections."""

    def __init__(self, store, name, d_model, n_heads, rng, d_kv=None):
        d_kv = d_kv or d_model
        self.n_heads = n_heads
        self.wq = Linear(store, f"{name}.q", d_model, d_model, rng, bias=False)
        self.wk = Linear(store, f"{name}.k", d_kv, d_model, rng, bias=False)
        self.wv = Linear(store, f"{name}.v", d_kv, d_model, rng, bias=False)
        self.wo = Linear(store, f"{name}.out", d_model, d_model, rng, bias=False)

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_mask=None,
                 logit_bias=None) -> Tensor:
        out = multi_head_attention(
            self.wq(q_in), self.wk(kv_in), self.wv(kv_in), self.n_heads,
            key_mask, logit_bias
        )
        return self.wo(out)
