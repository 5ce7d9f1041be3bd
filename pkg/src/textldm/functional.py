"""Differentiable building blocks with fused backward passes."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _result, _unbroadcast, as_tensor, get_dtype

# additive mask value standing in for -inf; exp() underflows to exactly 0
MASK_VALUE = -1e9


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), grad_fn)


def cross_entropy_from_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over unmasked positions of ``-log softmax(logits)[target]``.

    ``logits`` has shape ``(..., V)`` and ``targets`` the leading shape.
    ``mask`` (same shape as targets) selects positions that count.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    weights = np.asarray(mask, dtype=get_dtype())
    count = max(float(weights.sum()), 1.0)

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum() / count

    def grad_fn(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (weights[..., None] * (g / count)),)

    return _result(np.asarray(loss), (logits,), grad_fn)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Cosine along ``axis``; defined as 0 when either norm is below ``eps``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ValueError(f"cosine_similarity needs equal lengths along axis, got {a.shape}, {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    ok = (na >= eps) & (nb >= eps)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def grad_fn(g):
        g = np.expand_dims(g, axis) * ok
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g * (b.data / (na_s * nb_s) - cos * a.data / na_s**2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(g * (a.data / (na_s * nb_s) - cos * b.data / nb_s**2), b.shape)
        return ga, gb

    return _result(np.squeeze(cos, axis=axis), (a, b), grad_fn)


def rope_tables(positions, head_dim: int, base: float = 10000.0):
    """cos/sin tables of shape ``(len(positions), head_dim // 2)``."""
    if head_dim % 2:
        raise ValueError(f"rotary encoding needs an even head_dim, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(get_dtype()), np.sin(angles).astype(get_dtype())


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive feature pairs of ``x`` (``..., seq, head_dim``).

    Pair ``i`` at position ``p`` turns by ``p * base**(-2i/head_dim)``.
    """
    x = as_tensor(x)
    cos, sin = rope_tables(positions, x.shape[-1], base)
    x1, x2 = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def grad_fn(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _result(out, (x,), grad_fn)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """``softmax(q k^T / sqrt(head_dim) + mask) v`` over the last two axes.

    ``mask`` is additive and broadcast against the score array.
    """
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor(mask)
    return softmax(scores, axis=-1) @ v


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """Additive key mask ``(batch, 1, 1, seq)`` from a boolean validity array."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, MASK_VALUE).astype(get_dtype())[:, None, None, :]
