"""Text VAE with one latent per token, trained with reconstruction, KL and
representation alignment against a frozen teacher transformer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .rng import gaussian_sample, make_stream
from .tensor import Tensor, clip, embedding, exp, no_grad, parameter
from .transformer import TransformerConfig, init_transformer, transformer_forward

LOG_VAR_RANGE = (-30.0, 10.0)


@dataclass
class VaeConfig:
    vocab_size: int
    latent_dim: int = 16
    encoder: TransformerConfig = field(default_factory=TransformerConfig)
    decoder: TransformerConfig = field(default_factory=TransformerConfig)
    beta: float = 1e-3
    lam: float = 1.0
    repa_layer_offset: int = -3
    teacher: TransformerConfig = field(default_factory=lambda: TransformerConfig(layers=4, model_dim=128, heads=4))
    teacher_seed: int = 7

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        for key in ("encoder", "decoder", "teacher"):
            d[key] = TransformerConfig(**d[key])
        return cls(**d)


@dataclass
class Posterior:
    mu: Tensor
    log_var: Tensor
    h_enc: Tensor  # post-norm encoder output, the alignment tap
    mask: np.ndarray


@dataclass
class VaeLossBreakdown:
    ce: Tensor
    kl: Tensor
    repa: Tensor
    total: Tensor
    beta: float
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {"ce": self.ce.item(), "kl": self.kl.item(), "repa": self.repa.item(), "total": self.total.item()}


# -- frozen teacher -------------------------------------------------------------

@dataclass
class TeacherHandle:
    config: TransformerConfig
    embed: Tensor
    state: dict[str, Tensor]
    layer_offset: int

    @property
    def dim(self) -> int:
        return self.config.model_dim


def make_teacher(vocab_size: int, config: TransformerConfig, layer_offset: int = -3, seed: int = 7) -> TeacherHandle:
    """Randomly initialised, frozen transformer standing in for a pretrained LM."""
    if not -config.layers <= layer_offset <= -1:
        raise ValueError(f"layer offset {layer_offset} outside [-{config.layers}, -1]")
    rng = make_stream(seed, "teacher")
    embed = Tensor(rng.normal(0.0, 1.0, size=(vocab_size, config.model_dim)))
    state = init_transformer(config, rng, prefix="teacher.")
    for p in state.values():
        p.requires_grad = False
    return TeacherHandle(config, embed, state, layer_offset)


def teacher_hidden(teacher: TeacherHandle, ids: np.ndarray, mask=None) -> Tensor:
    """Hidden states of the selected teacher layer; never part of a graph."""
    ids = np.atleast_2d(ids)
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    with no_grad():
        hidden, _ = transformer_forward(
            teacher.config, teacher.state, embedding(teacher.embed, ids), F.padding_mask(mask)
        )
    return hidden[teacher.config.layers + teacher.layer_offset].detach()


# -- loss terms -------------------------------------------------------------------

def reparameterize(post: Posterior, rng: np.random.Generator) -> Tensor:
    """``z = mu + exp(log_var / 2) * eps``; eps carries no gradient."""
    eps = gaussian_sample(post.mu.shape, rng)
    return post.mu + exp(post.log_var * 0.5) * eps


def kl_divergence(post: Posterior) -> Tensor:
    """Mean over unmasked positions of ``0.5 * sum_d(mu^2 + var - 1 - log_var)``."""
    per_dim = post.mu * post.mu + exp(post.log_var) - 1.0 - post.log_var
    per_pos = per_dim.sum(axis=-1) * 0.5
    w = np.asarray(post.mask, dtype=per_pos.data.dtype)
    return (per_pos * w).sum() * (1.0 / max(float(w.sum()), 1.0))


def repa_loss(h_enc: Tensor, target: Tensor, projection: dict[str, Tensor], mask=None) -> Tensor:
    """Negative mean cosine between projected encoder features and the
    (stop-gradient) teacher features, over unmasked positions."""
    if h_enc.shape[:-1] != target.shape[:-1]:
        raise ValueError(f"row mismatch between encoder {h_enc.shape} and teacher {target.shape}")
    proj = h_enc @ projection["w"] + projection["b"]
    cos = F.cosine_similarity(proj, target.detach(), axis=-1)
    w = np.ones(cos.shape) if mask is None else np.asarray(mask, dtype=float)
    w = w.astype(cos.data.dtype)
    return (cos * w).sum() * (-1.0 / max(float(w.sum()), 1.0))


# -- model ----------------------------------------------------------------------

class TextVAE:
    """Encoder ``tokens -> (mu, log_var)`` per token and a parallel decoder
    ``latents -> logits``, plus the alignment projection."""

    def __init__(self, config: VaeConfig, seed: int = 0, teacher: TeacherHandle | None = None):
        self.config = config
        rng = make_stream(seed, "init.vae")
        c, d = config, config.latent_dim
        de, dd = c.encoder.model_dim, c.decoder.model_dim
        self.teacher = teacher or make_teacher(c.vocab_size, c.teacher, c.repa_layer_offset, c.teacher_seed)

        def w(name, *shape):
            return parameter(rng.normal(0.0, 0.02, size=shape), name)

        def z(name, *shape):
            return parameter(np.zeros(shape), name)

        self.embed = w("enc.embed", c.vocab_size, de)
        self.encoder = init_transformer(c.encoder, rng, prefix="enc.")
        self.heads = {"mu.w": w("enc.mu.w", de, d), "mu.b": z("enc.mu.b", d),
                      "lv.w": w("enc.lv.w", de, d), "lv.b": z("enc.lv.b", d)}
        self.dec_in = {"w": w("dec.in.w", d, dd), "b": z("dec.in.b", dd)}
        self.decoder = init_transformer(c.decoder, rng, prefix="dec.")
        self.dec_out = {"w": w("dec.out.w", dd, c.vocab_size), "b": z("dec.out.b", c.vocab_size)}
        self.projection = {"w": w("repa.proj.w", de, self.teacher.dim), "b": z("repa.proj.b", self.teacher.dim)}

    def parameters(self) -> dict[str, Tensor]:
        out = {self.embed.name: self.embed}
        for group in (self.encoder, self.heads, self.dec_in, self.decoder, self.dec_out, self.projection):
            for p in group.values():
                out[p.name] = p
        return out

    def encoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if k.startswith("enc.")}

    def encode(self, ids, mask=None) -> Posterior:
        """Per-token posterior for ``ids`` of shape ``(batch, seq)`` or ``(seq,)``."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        _, h = transformer_forward(self.config.encoder, self.encoder, embedding(self.embed, ids), F.padding_mask(mask))
        mu = h @ self.heads["mu.w"] + self.heads["mu.b"]
        log_var = clip(h @ self.heads["lv.w"] + self.heads["lv.b"], *LOG_VAR_RANGE)
        return Posterior(mu, log_var, h, np.asarray(mask, dtype=bool))

    def decode(self, z: Tensor, mask=None) -> Tensor:
        """Vocabulary logits for every latent row, all positions at once."""
        if z.ndim == 2:
            z = z.reshape(1, *z.shape)
        if z.shape[-1] != self.config.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != configured {self.config.latent_dim}")
        if mask is None:
            mask = np.ones(z.shape[:2], dtype=bool)
        x = z @ self.dec_in["w"] + self.dec_in["b"]
        _, h = transformer_forward(self.config.decoder, self.decoder, x, F.padding_mask(mask))
        return h @ self.dec_out["w"] + self.dec_out["b"]

    def encode_split(self, context_ids, target_ids) -> tuple[Posterior, Posterior]:
        """Encode context and target in two independent passes so that no
        target token can influence the context latents."""
        return self._encode_maybe_empty(context_ids), self._encode_maybe_empty(target_ids)

    def _encode_maybe_empty(self, ids) -> Posterior:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] == 0:
            shape = ids.shape[:-1] if ids.ndim > 1 else (1,)
            empty = lambda k: Tensor(np.zeros(shape + (0, k)))  # noqa: E731
            return Posterior(empty(self.config.latent_dim), empty(self.config.latent_dim),
                             empty(self.config.encoder.model_dim), np.zeros(shape + (0,), dtype=bool))
        return self.encode(ids)

    def training_loss(self, ids, mask, rng: np.random.Generator, beta=None, lam=None) -> VaeLossBreakdown:
        """``CE + beta * KL + lam * REPA`` with the padding mask applied to every term."""
        beta = self.config.beta if beta is None else beta
        lam = self.config.lam if lam is None else lam
        ids = np.atleast_2d(ids)
        mask = np.ones(ids.shape, dtype=bool) if mask is None else mask
        post = self.encode(ids, mask)
        z = reparameterize(post, rng)
        logits = self.decode(z, mask)
        ce = F.cross_entropy_from_logits(logits, ids, mask)
        kl = kl_divergence(post)
        if lam:
            repa = repa_loss(post.h_enc, teacher_hidden(self.teacher, ids, mask), self.projection, mask)
        else:
            repa = Tensor(0.0)
        total = ce + kl * beta + repa * lam
        return VaeLossBreakdown(ce, kl, repa, total, beta, lam)

    def reconstruct(self, ids, mask=None) -> np.ndarray:
        """Logits from decoding the posterior means (no sampling)."""
        with no_grad():
            post = self.encode(ids, mask)
            return self.decode(post.mu, post.mask).data


def vae_training_loss(model: TextVAE, ids, mask, rng, beta=1e-3, lam=1.0) -> VaeLossBreakdown:
    return model.training_loss(ids, mask, rng, beta, lam)
