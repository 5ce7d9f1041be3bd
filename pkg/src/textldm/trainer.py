"""Optimisation loops for both stages and (de)serialisation of the models."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .corpus import Vocabulary, batch_iterator_dit, batch_iterator_vae, encode_document, pad_batch
from .flowdiff import DiT, DiTConfig, LatentStats, Schedule, cfm_training_loss, latent_standardize
from .rng import RngStreams
from .tensor import Tensor, backward, no_grad
from .textvae import TextVAE, VaeConfig, reparameterize

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    kl_warmup_fraction: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 100
    max_len: int = 49

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("steps, batch and lr must be positive")
        if not 0.0 <= self.kl_warmup_fraction <= 1.0:
            raise ValueError("kl_warmup_fraction must lie in [0, 1]")


class AdamW:
    """Adam with bias correction and decoupled weight decay:
    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"opt.m.{k}"].copy()
            self.v[k] = tensors[f"opt.v.{k}"].copy()
        self.step_count = step


def kl_weight(step: int, total_steps: int, beta: float, warmup_fraction: float = 0.1) -> float:
    """Linear ramp from 0 to ``beta`` over the first ``warmup_fraction`` of training."""
    warm = warmup_fraction * total_steps
    if warm <= 0:
        return beta
    return beta * min(step / warm, 1.0)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the old norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# -- model <-> checkpoint --------------------------------------------------------------

def vae_to_checkpoint(model: TextVAE, vocab: Vocabulary, extra: dict | None = None, opt: AdamW | None = None) -> Checkpoint:
    tensors = {k: p.data for k, p in model.parameters().items()}
    meta = {
        "kind": "vae",
        "vae_config": json.dumps(model.config.to_dict(), sort_keys=True),
        "vocab": " ".join(vocab.tokens),
    }
    if opt is not None:
        tensors.update(opt.state_tensors())
        meta["opt.step"] = str(opt.step_count)
    meta.update(extra or {})
    return Checkpoint(tensors, meta)


def vae_from_checkpoint(ckpt: Checkpoint) -> tuple[TextVAE, Vocabulary]:
    if ckpt.meta.get("kind") != "vae":
        raise CheckpointError(f"expected a VAE checkpoint, got kind={ckpt.meta.get('kind')!r}")
    config = VaeConfig.from_dict(json.loads(ckpt.meta["vae_config"]))
    model = TextVAE(config)
    _load_params(model.parameters(), ckpt)
    return model, Vocabulary(ckpt.meta["vocab"].split(" "))


def dit_to_checkpoint(dit: DiT, extra: dict | None = None, opt: AdamW | None = None) -> Checkpoint:
    tensors = {k: p.data for k, p in dit.parameters().items()}
    if dit.stats is not None:
        tensors["latent.mean"] = dit.stats.mean
        tensors["latent.std"] = dit.stats.std
    meta = {"kind": "dit", "dit_config": json.dumps(dit.config.to_dict(), sort_keys=True)}
    if opt is not None:
        tensors.update(opt.state_tensors())
        meta["opt.step"] = str(opt.step_count)
    meta.update(extra or {})
    return Checkpoint(tensors, meta)


def dit_from_checkpoint(ckpt: Checkpoint) -> DiT:
    if ckpt.meta.get("kind") != "dit":
        raise CheckpointError(f"expected a DiT checkpoint, got kind={ckpt.meta.get('kind')!r}")
    dit = DiT(DiTConfig.from_dict(json.loads(ckpt.meta["dit_config"])))
    _load_params(dit.parameters(), ckpt)
    if "latent.mean" in ckpt.tensors:
        dit.stats = LatentStats(ckpt.tensors["latent.mean"].copy(), ckpt.tensors["latent.std"].copy())
    return dit


def _load_params(params: dict[str, Tensor], ckpt: Checkpoint) -> None:
    for name, p in params.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(np.float32).copy()


# -- stage 1: VAE ------------------------------------------------------------------------

@dataclass
class TrainRun:
    model: object
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def train_vae(
    corpus: Sequence[str],
    vocab: Vocabulary,
    vae_config: VaeConfig,
    config: TrainConfig,
    callback: Callable[[int, dict], None] | None = None,
) -> TrainRun:
    """Train the text VAE; deterministic for a fixed ``config.seed``."""
    streams = RngStreams(config.seed)
    model = TextVAE(vae_config, seed=config.seed)
    params = model.parameters()
    opt = AdamW(params, config.lr, config.betas, config.eps, config.weight_decay)
    batches = batch_iterator_vae(corpus, vocab, config.batch, config.max_len, config.seed)
    history = []
    for step in range(config.steps):
        b = next(batches)
        beta = kl_weight(step, config.steps, vae_config.beta, config.kl_warmup_fraction)
        parts = model.training_loss(b.ids, b.mask, streams["noise"], beta=beta)
        grads = backward(parts.total, params)
        norm = clip_gradients(grads, config.grad_clip)
        opt.step(grads)
        if step % config.eval_every == 0 or step == config.steps - 1:
            rec = {"step": step, "beta": beta, "grad_norm": norm, **parts.as_floats()}
            history.append(rec)
            log.info("vae step %d %s", step, _fmt(rec))
            if callback:
                callback(step, rec)
    meta = {"train_config": json.dumps(asdict(config), sort_keys=True), "rng_state": streams.state()}
    return TrainRun(model, vae_to_checkpoint(model, vocab, meta, opt), history)


# -- stage 2: DiT ------------------------------------------------------------------------------

def encode_latents(vae: TextVAE, seqs: Sequence[np.ndarray], rng: np.random.Generator | None) -> list[np.ndarray]:
    """Encode each sequence (as one padded batch) to latents.

    With ``rng`` the latents are reparameterised samples, otherwise means.
    Empty sequences give empty latents.
    """
    d = vae.config.latent_dim
    out = [np.zeros((0, d), np.float32) for _ in seqs]
    live = [i for i, s in enumerate(seqs) if len(s)]
    if not live:
        return out
    ids, mask = pad_batch([seqs[i] for i in live])
    with no_grad():
        post = vae.encode(ids, mask)
        z = (reparameterize(post, rng) if rng is not None else post.mu).data
    for j, i in enumerate(live):
        out[i] = z[j, : len(seqs[i])]
    return out


def compute_latent_stats(vae: TextVAE, docs: Sequence[str], vocab: Vocabulary, max_len: int, rng, chunk: int = 64) -> LatentStats:
    """Per-channel statistics of sampled latents over held-out documents."""
    seqs = [encode_document(d, vocab, max_len) for d in docs]
    rows = []
    for i in range(0, len(seqs), chunk):
        rows.extend(encode_latents(vae, seqs[i : i + chunk], rng))
    return LatentStats.from_latents(np.concatenate(rows, axis=0))


@dataclass
class DitTrainConfig(TrainConfig):
    steps: int = 10000
    schedule: str = "logit_normal"
    schedule_std: float = 1.5
    p_uncond: float = 0.1
    p_full: float = 0.1
    split_lo: float = 0.4
    split_hi: float = 0.6
    stats_docs: int = 256


def train_dit(
    vae: TextVAE,
    corpus: Sequence[str],
    vocab: Vocabulary,
    dit_config: DiTConfig,
    config: DitTrainConfig,
    heldout: Sequence[str] | None = None,
    callback: Callable[[int, dict], None] | None = None,
) -> TrainRun:
    """Train the velocity model on frozen-VAE latents of context/target splits."""
    if dit_config.latent_dim != vae.config.latent_dim:
        raise ValueError(f"DiT latent dim {dit_config.latent_dim} != VAE latent dim {vae.config.latent_dim}")
    streams = RngStreams(config.seed)
    schedule = Schedule(config.schedule, config.schedule_std)
    dit = DiT(dit_config, seed=config.seed)
    stats_docs = list(heldout) if heldout else list(corpus[: config.stats_docs])
    dit.stats = compute_latent_stats(vae, stats_docs, vocab, config.max_len, streams["stats"])
    params = dit.parameters()
    opt = AdamW(params, config.lr, config.betas, config.eps, config.weight_decay)
    batches = batch_iterator_dit(corpus, vocab, config.batch, config.max_len, config.seed,
                                 config.split_lo, config.split_hi, config.p_full)
    history = []
    for step in range(config.steps):
        samples = next(batches)
        ctx = encode_latents(vae, [s.context for s in samples], streams["noise"])
        tgt = encode_latents(vae, [s.target for s in samples], streams["noise"])
        ctx = [latent_standardize(c, dit.stats).astype(np.float32) for c in ctx]
        tgt = [latent_standardize(t, dit.stats).astype(np.float32) for t in tgt]
        loss = cfm_training_loss(dit, ctx, tgt, schedule, config.p_uncond, streams["flow"])
        grads = backward(loss, params)
        norm = clip_gradients(grads, config.grad_clip)
        opt.step(grads)
        if step % config.eval_every == 0 or step == config.steps - 1:
            rec = {"step": step, "loss": loss.item(), "grad_norm": norm}
            history.append(rec)
            log.info("dit step %d %s", step, _fmt(rec))
            if callback:
                callback(step, rec)
    meta = {
        "train_config": json.dumps(asdict(config), sort_keys=True),
        "rng_state": streams.state(),
        "schedule": schedule.kind,
        "schedule_std": repr(schedule.std),
    }
    return TrainRun(dit, dit_to_checkpoint(dit, meta, opt), history)


def _fmt(rec: dict) -> str:
    return " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items() if k != "step")
