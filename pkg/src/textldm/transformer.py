"""Pre-norm bidirectional transformer with rotary positions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor, parameter, silu


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ffn_multiplier: int = 4
    rope_base: float = 10000.0
    max_positions: int = 512
    use_rope: bool = True
    # adaptive-norm modulation from a conditioning vector (DiT timestep ablation)
    adaptive_norm: bool = False

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ValueError(f"head_dim {self.head_dim} must be even for rotary pairing")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def init_transformer(cfg: TransformerConfig, rng: np.random.Generator, prefix: str = "") -> dict[str, Tensor]:
    """Parameters: N(0, 0.02) weights, zero biases, unit norm gains.

    Returned in a fixed insertion order so parameter layouts are stable.
    """
    d, f = cfg.model_dim, cfg.model_dim * cfg.ffn_multiplier
    state: dict[str, Tensor] = {}

    # dict keys are local; tensor names carry the prefix so several stacks
    # can share one gradient record
    def weight(name, *shape):
        state[name] = parameter(rng.normal(0.0, 0.02, size=shape), prefix + name)

    def const(name, value, *shape):
        state[name] = parameter(np.full(shape, value), prefix + name)

    for i in range(cfg.layers):
        p = f"layer{i}."
        const(p + "ln1.g", 1.0, d)
        const(p + "ln1.b", 0.0, d)
        for proj in ("q", "k", "v", "o"):
            weight(p + f"attn.{proj}.w", d, d)
            const(p + f"attn.{proj}.b", 0.0, d)
        const(p + "ln2.g", 1.0, d)
        const(p + "ln2.b", 0.0, d)
        weight(p + "ffn.in.w", d, f)
        const(p + "ffn.in.b", 0.0, f)
        weight(p + "ffn.out.w", f, d)
        const(p + "ffn.out.b", 0.0, d)
        if cfg.adaptive_norm:
            # zero init: modulation starts as the identity
            const(p + "mod.w", 0.0, d, 4 * d)
            const(p + "mod.b", 0.0, 4 * d)
    const("final.ln.g", 1.0, d)
    const("final.ln.b", 0.0, d)
    return state


def _linear(x: Tensor, state, name: str) -> Tensor:
    return x @ state[name + ".w"] + state[name + ".b"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * hd)


def self_attention(cfg: TransformerConfig, state, prefix: str, x: Tensor, mask, positions) -> Tensor:
    q = _split_heads(_linear(x, state, prefix + "q"), cfg.heads)
    k = _split_heads(_linear(x, state, prefix + "k"), cfg.heads)
    v = _split_heads(_linear(x, state, prefix + "v"), cfg.heads)
    if cfg.use_rope:
        q = F.rope_apply(q, positions, cfg.rope_base)
        k = F.rope_apply(k, positions, cfg.rope_base)
    return _linear(_merge_heads(F.attention(q, k, v, mask)), state, prefix + "o")


def transformer_forward(
    cfg: TransformerConfig,
    state: dict[str, Tensor],
    inputs: Tensor,
    mask=None,
    cond: Tensor | None = None,
) -> tuple[list[Tensor], Tensor]:
    """Run the stack on ``inputs`` of shape ``(batch, seq, model_dim)``.

    Parameters
    ----------
    mask : additive attention mask broadcastable to ``(batch, heads, seq, seq)``
        (see :func:`functional.padding_mask`), or None for full attention.
    cond : ``(batch, model_dim)`` conditioning vector, used only when
        ``cfg.adaptive_norm`` is set.

    Returns
    -------
    hidden : the residual stream after each block (``cfg.layers`` entries)
    final : the last hidden state passed through the final LayerNorm
    """
    if inputs.ndim == 2:
        inputs = inputs.reshape(1, *inputs.shape)
    seq = inputs.shape[1]
    if seq > cfg.max_positions:
        raise ValueError(f"sequence length {seq} exceeds max_positions {cfg.max_positions}")
    positions = np.arange(seq)
    s = state.__getitem__
    x = inputs
    hidden = []
    for i in range(cfg.layers):
        p = f"layer{i}."
        h = F.layer_norm(x, s(p + "ln1.g"), s(p + "ln1.b"))
        if cfg.adaptive_norm and cond is not None:
            mod = (cond @ s(p + "mod.w") + s(p + "mod.b")).reshape(cond.shape[0], 1, 4 * cfg.model_dim)
            d = cfg.model_dim
            h = h * (mod[:, :, 0:d] + 1.0) + mod[:, :, d : 2 * d]
        x = x + self_attention(cfg, state, p + "attn.", h, mask, positions)
        h = F.layer_norm(x, s(p + "ln2.g"), s(p + "ln2.b"))
        if cfg.adaptive_norm and cond is not None:
            h = h * (mod[:, :, 2 * d : 3 * d] + 1.0) + mod[:, :, 3 * d : 4 * d]
        ff = silu(h @ s(p + "ffn.in.w") + s(p + "ffn.in.b"))
        x = x + (ff @ s(p + "ffn.out.w") + s(p + "ffn.out.b"))
        hidden.append(x)
    final = F.layer_norm(x, s("final.ln.g"), s("final.ln.b"))
    return hidden, final


def parameter_count(state: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in state.values()))


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features of scalar times, shape ``(len(t), dim)``."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)

