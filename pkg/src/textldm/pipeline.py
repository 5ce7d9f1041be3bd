"""Glue between the trained stages: prompt -> latents -> text."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Vocabulary, decode, encode, pad_batch
from .flowdiff import DiT, Schedule, euler_sample_batch, latent_destandardize, latent_standardize
from .tensor import Tensor, no_grad
from .textvae import TextVAE
from .trainer import encode_latents


@dataclass
class LatentGenerator:
    """Continuation generator: encode the prompt with the VAE (posterior
    means), sample target latents with guided Euler steps, decode."""

    vae: TextVAE
    dit: DiT
    steps: int = 50
    cfg: float = 7.0
    schedule: Schedule = Schedule()

    def __post_init__(self):
        if self.vae.config.latent_dim != self.dit.config.latent_dim:
            raise ValueError(
                f"latent dim mismatch: VAE {self.vae.config.latent_dim}, DiT {self.dit.config.latent_dim}"
            )

    def contexts_to_latents(self, contexts: Sequence[np.ndarray | None]) -> list[np.ndarray | None]:
        live = [c for c in contexts if c is not None]
        z = iter(encode_latents(self.vae, live, None))
        return [None if c is None else latent_standardize(next(z), self.dit.stats).astype(np.float32)
                for c in contexts]

    def decode_latents(self, latents: Sequence[np.ndarray]) -> list[np.ndarray]:
        out = [np.zeros(0, dtype=np.int64) for _ in latents]
        live = [i for i, z in enumerate(latents) if len(z)]
        if not live:
            return out
        width = max(len(latents[i]) for i in live)
        d = self.vae.config.latent_dim
        z = np.zeros((len(live), width, d), dtype=np.float32)
        _, mask = pad_batch([np.zeros(len(latents[i])) for i in live], width)
        for j, i in enumerate(live):
            z[j, : len(latents[i])] = latent_destandardize(latents[i], self.dit.stats)
        with no_grad():
            logits = self.vae.decode(Tensor(z), mask).data
        for j, i in enumerate(live):
            out[i] = logits[j, : len(latents[i])].argmax(axis=-1)
        return out

    def sample(self, contexts, target_lens, rng, trace_at=()):
        res = euler_sample_batch(
            self.dit, self.contexts_to_latents(contexts), list(target_lens), self.steps, self.cfg, rng,
            self.schedule, trace_at,
        )
        return res

    def __call__(self, contexts, target_lens, rng):
        res = self.sample(contexts, target_lens, rng)
        return self.decode_latents(res.latents), [res.nfe] * len(contexts)


def generate_text(gen: LatentGenerator, vocab: Vocabulary, prompt: str | None, length: int, rng) -> str:
    """One continuation (or unconditional passage when ``prompt`` is None), EOS-truncated."""
    ctx = None if prompt is None else np.array(encode(prompt, vocab), dtype=np.int64)
    ids, _ = gen([ctx], [length], rng)
    return decode(ids[0], vocab, stop_at_eos=True)


def denoising_trace(gen: LatentGenerator, vocab: Vocabulary, prompt: str | None, length: int, rng,
                    dump_at: Sequence[int]) -> list[tuple[int, float, str]]:
    """``(steps taken, noise level, decoded text)`` after each requested step count."""
    for n in dump_at:
        if not 0 <= n <= gen.steps:
            raise ValueError(f"trace step {n} outside [0, {gen.steps}]")
    ctx = None if prompt is None else np.array(encode(prompt, vocab), dtype=np.int64)
    indices = [gen.steps - n for n in dump_at]
    res = gen.sample([ctx], [length], rng, trace_at=indices)
    records = []
    for n, k in zip(dump_at, indices):
        ids = gen.decode_latents([res.trace[k][0]])[0]
        records.append((n, float(res.grid[gen.steps - k]), decode(ids, vocab, stop_at_eos=True)))
    return records
