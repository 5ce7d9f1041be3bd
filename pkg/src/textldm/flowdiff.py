"""Flow matching in latent space: schedules, the velocity model, the CFM
objective, classifier-free guidance and the Euler sampler.

Time conventions
----------------
Training follows the straight path ``z_t = (1 - t) z0 + t z_tgt`` with noise
at ``t = 0``; the model regresses ``z_tgt - z0``. The sampler walks a grid of
*noise levels* ``1 = s_K > ... > s_0 = 0`` (``s = 1 - t``), queries the model
at ``t = 1 - s_k`` and takes ``z <- z - (s_k - s_{k-1}) * dz/ds`` with
``dz/ds = -v``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri

from . import functional as F
from .rng import gaussian_sample, make_stream
from .tensor import Tensor, as_tensor, concat, no_grad, parameter, silu
from .transformer import TransformerConfig, init_transformer, sinusoidal_embedding, transformer_forward


# -- timestep schedules ------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    kind: str = "logit_normal"
    std: float = 1.5

    def __post_init__(self):
        if self.kind not in ("uniform", "logit_normal"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "logit_normal" and not self.std > 0:
            raise ValueError("logit-normal schedule needs std > 0")

    def cdf(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "uniform":
            return np.clip(t, 0.0, 1.0)
        with np.errstate(divide="ignore"):
            return ndtr(logit(t) / self.std)

    def ppf(self, q):
        q = np.asarray(q, dtype=np.float64)
        if self.kind == "uniform":
            return q.copy()
        return expit(self.std * ndtri(q))


def sample_timestep(schedule: Schedule, rng: np.random.Generator, size=None):
    """``t ~ U(0, 1)`` or ``t = sigmoid(s)`` with ``s ~ N(0, std^2)``."""
    if schedule.kind == "uniform":
        return rng.random(size)
    return expit(schedule.std * rng.standard_normal(size))


def inference_grid(schedule: Schedule, steps: int) -> np.ndarray:
    """``[s_K, ..., s_0]``: the schedule's quantiles at ``k / K``, from 1 down to 0."""
    if steps < 1:
        raise ValueError(f"need at least one step, got {steps}")
    grid = schedule.ppf(np.arange(steps, -1, -1, dtype=np.float64) / steps)
    grid[0], grid[-1] = 1.0, 0.0
    if not np.all(np.diff(grid) < 0):
        raise ValueError("inference grid is not strictly decreasing; use fewer steps")
    return grid


def interpolate(z0, z_tgt, t):
    """``(1 - t) z0 + t z_tgt``; ``t`` is a scalar or broadcasts against the inputs."""
    z0, z_tgt = np.asarray(z0), np.asarray(z_tgt)
    if z0.shape != z_tgt.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {z_tgt.shape}")
    t = np.asarray(t, dtype=z0.dtype)
    return (1 - t) * z0 + t * z_tgt


def cfm_target(z0, z_tgt):
    """Velocity of the straight path, constant in ``t``."""
    return np.asarray(z_tgt) - np.asarray(z0)


# -- latent standardisation --------------------------------------------------------

@dataclass
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_latents(cls, rows: np.ndarray, floor: float = 1e-6) -> "LatentStats":
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, rows.shape[-1])
        return cls(rows.mean(axis=0).astype(np.float32),
                   np.maximum(rows.std(axis=0), floor).astype(np.float32))


def latent_standardize(z, stats: LatentStats | None):
    if stats is None:
        raise ValueError("latent statistics are missing (train or load a DiT checkpoint first)")
    return (np.asarray(z) - stats.mean) / stats.std


def latent_destandardize(z, stats: LatentStats | None):
    if stats is None:
        raise ValueError("latent statistics are missing (train or load a DiT checkpoint first)")
    return np.asarray(z) * stats.std + stats.mean


# -- the velocity model -------------------------------------------------------------

@dataclass
class DiTConfig:
    latent_dim: int = 16
    backbone: TransformerConfig = field(default_factory=lambda: TransformerConfig(layers=6, model_dim=192, heads=6))
    timestep_conditioning: bool = False

    def __post_init__(self):
        if self.backbone.adaptive_norm != self.timestep_conditioning:
            self.backbone = TransformerConfig(**{**asdict(self.backbone), "adaptive_norm": self.timestep_conditioning})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        d = dict(d)
        d["backbone"] = TransformerConfig(**d["backbone"])
        return cls(**d)


class DiT:
    """Transformer over ``[context ; noisy target]`` latents predicting the
    velocity at every position (only target rows are read out)."""

    def __init__(self, config: DiTConfig, seed: int = 0):
        self.config = config
        rng = make_stream(seed, "init.dit")
        d, dm = config.latent_dim, config.backbone.model_dim
        self.in_proj = {"w": parameter(rng.normal(0.0, 0.02, size=(d, dm)), "dit.in.w"),
                        "b": parameter(np.zeros(dm), "dit.in.b")}
        self.backbone = init_transformer(config.backbone, rng, prefix="dit.")
        # zero-initialised readout: a fresh model predicts zero velocity
        self.out_proj = {"w": parameter(np.zeros((dm, d)), "dit.out.w"),
                         "b": parameter(np.zeros(d), "dit.out.b")}
        self.time_mlp = {}
        if config.timestep_conditioning:
            self.time_mlp = {"w1": parameter(rng.normal(0.0, 0.02, size=(dm, dm)), "dit.time.w1"),
                             "b1": parameter(np.zeros(dm), "dit.time.b1"),
                             "w2": parameter(rng.normal(0.0, 0.02, size=(dm, dm)), "dit.time.w2"),
                             "b2": parameter(np.zeros(dm), "dit.time.b2")}
        self.stats: LatentStats | None = None
        self.forward_calls = 0

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for group in (self.in_proj, self.backbone, self.out_proj, self.time_mlp):
            for p in group.values():
                out[p.name] = p
        return out

    def forward(self, x, valid=None, t=None) -> Tensor:
        """Velocities for a packed batch ``x`` of shape ``(batch, seq, latent_dim)``.

        ``valid`` marks real (non-padding) rows; ``t`` holds one time per
        sequence and is only used with timestep conditioning.
        """
        self.forward_calls += 1
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        mask = None if valid is None else F.padding_mask(valid)
        cond = None
        if self.config.timestep_conditioning:
            t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
            emb = Tensor(sinusoidal_embedding(t, self.config.backbone.model_dim))
            m = self.time_mlp
            cond = silu(emb @ m["w1"] + m["b1"]) @ m["w2"] + m["b2"]
        h = x @ self.in_proj["w"] + self.in_proj["b"]
        _, h = transformer_forward(self.config.backbone, self.backbone, h, mask, cond)
        return h @ self.out_proj["w"] + self.out_proj["b"]


def model_velocity(dit: DiT, z_t, t, z_c=None) -> Tensor:
    """Velocity at the target rows for equal-length batches.

    ``z_t`` is ``(T, d)`` or ``(B, T, d)``; ``z_c`` is the context (or its
    null stand-in) with the same leading shape, or None for no context.
    """
    z_t = as_tensor(z_t)
    single = z_t.ndim == 2
    if single:
        z_t = z_t.reshape(1, *z_t.shape)
    m = 0
    x = z_t
    if z_c is not None:
        z_c = as_tensor(z_c)
        if z_c.ndim == 2:
            z_c = z_c.reshape(1, *z_c.shape)
        m = z_c.shape[1]
        if m:
            x = concat([z_c, z_t], axis=1)
    v = dit.forward(x, None, t)[:, m:, :]
    return v.reshape(v.shape[1:]) if single else v


def null_condition(z_c):
    """Dropped context: zero vectors of unchanged length."""
    return None if z_c is None else np.zeros_like(np.asarray(z_c))


def combine_guidance(v_uncond: np.ndarray, v_cond: np.ndarray, w: float) -> np.ndarray:
    """``v_null + w (v_c - v_null)`` written as ``(1 - w) v_null + w v_c`` so
    that ``w = 0`` and ``w = 1`` return the respective branch exactly."""
    return (1.0 - w) * v_uncond + w * v_cond


def guided_velocity(dit: DiT, z_t, t, z_c, w: float) -> np.ndarray:
    """Classifier-free guided velocity from exactly two model evaluations
    (null branch first, then the conditional branch)."""
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    with no_grad():
        v_null = model_velocity(dit, z_t, t, null_condition(z_c)).data
        v_cond = model_velocity(dit, z_t, t, z_c).data
    return combine_guidance(v_null, v_cond, w)


# -- packing of variable-length batches ------------------------------------------------

@dataclass
class Packed:
    x: np.ndarray  # (B, S, d)
    valid: np.ndarray  # (B, S) real rows
    target: np.ndarray  # (B, S) target rows
    offsets: list[tuple[int, int]]  # (context_len, target_len) per sample


def pack(contexts: Sequence[np.ndarray], targets: Sequence[np.ndarray], dim: int) -> Packed:
    lens = [(len(c), len(t)) for c, t in zip(contexts, targets)]
    width = max((m + n for m, n in lens), default=0)
    x = np.zeros((len(lens), width, dim), dtype=np.float32)
    valid = np.zeros((len(lens), width), dtype=bool)
    target = np.zeros_like(valid)
    for i, ((m, n), c, t) in enumerate(zip(lens, contexts, targets)):
        if m:
            x[i, :m] = c
        x[i, m : m + n] = t
        valid[i, : m + n] = True
        target[i, m : m + n] = True
    return Packed(x, valid, target, lens)


def unpack_targets(v: np.ndarray, packed: Packed) -> list[np.ndarray]:
    return [v[i, m : m + n] for i, (m, n) in enumerate(packed.offsets)]


# -- training objective ------------------------------------------------------------------

@dataclass
class CfmBatch:
    """Everything random about one CFM batch, drawn up front."""

    t: np.ndarray
    dropped: np.ndarray
    noise: list[np.ndarray]


def draw_cfm_batch(targets: Sequence[np.ndarray], schedule: Schedule, p_uncond: float, rng) -> CfmBatch:
    n = len(targets)
    t = sample_timestep(schedule, rng, n)
    dropped = rng.random(n) < p_uncond
    noise = [gaussian_sample(np.shape(z), rng).data for z in targets]
    return CfmBatch(t, dropped, noise)


def cfm_training_loss(
    dit: DiT,
    contexts: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    schedule: Schedule,
    p_uncond: float,
    rng: np.random.Generator | None = None,
    draws: CfmBatch | None = None,
    velocity_fn: Callable | None = None,
) -> Tensor:
    """Mean over target tokens of ``||v(z_t, t, z_c) - (z_tgt - z0)||^2``.

    Each sample gets its own ``t`` from ``schedule`` and, with probability
    ``p_uncond``, a zeroed context. ``velocity_fn(packed, t)`` overrides the
    model (used to test the objective with oracle fields).
    """
    if draws is None:
        draws = draw_cfm_batch(targets, schedule, p_uncond, rng)
    ctx = [np.zeros_like(c) if drop else c for c, drop in zip(contexts, draws.dropped)]
    z_t = [interpolate(z0, z, t) for z0, z, t in zip(draws.noise, targets, draws.t)]
    goal = [cfm_target(z0, z) for z0, z in zip(draws.noise, targets)]
    dim = np.shape(targets[0])[-1]
    packed = pack(ctx, z_t, dim)
    goal_packed = pack([np.zeros_like(c) for c in ctx], goal, dim).x
    if velocity_fn is None:
        v = dit.forward(packed.x, packed.valid, draws.t)
    else:
        v = as_tensor(velocity_fn(packed, draws.t))
    w = packed.target[..., None].astype(v.data.dtype)
    diff = (v - Tensor(goal_packed)) * w
    return (diff * diff).sum() * (1.0 / max(int(packed.target.sum()), 1))


# -- sampling ---------------------------------------------------------------------------

@dataclass
class SampleResult:
    latents: list[np.ndarray]
    nfe: int
    trace: dict[int, list[np.ndarray]]
    grid: np.ndarray


def euler_integrate(velocity, z_init: np.ndarray, grid: np.ndarray, trace_at: Sequence[int] = ()):
    """Generic Euler loop over a noise-level grid ``[s_K, ..., s_0]``.

    ``velocity(z, k, t)`` returns ``dz/dt`` at interpolation time ``t = 1 - s_k``.
    Returns the final state and ``{grid index: state}`` for ``trace_at``.
    """
    steps = len(grid) - 1
    z = np.array(z_init, copy=True)
    trace = {}
    if steps in trace_at:
        trace[steps] = z.copy()
    for k in range(steps, 0, -1):
        ds = grid[steps - k] - grid[steps - k + 1]
        v = velocity(z, k, 1.0 - grid[steps - k])
        z = z + (ds * v).astype(z.dtype)
        if k - 1 in trace_at:
            trace[k - 1] = z.copy()
    return z, trace


def euler_sample_batch(
    dit: DiT,
    contexts: Sequence[np.ndarray | None],
    target_lens: Sequence[int],
    steps: int,
    w: float,
    rng: np.random.Generator,
    schedule: Schedule = Schedule(),
    trace_at: Sequence[int] = (),
) -> SampleResult:
    """Guided Euler sampling for several prompts at once.

    A context of ``None`` means unconditional generation: the context is
    skipped and each step costs one evaluation instead of two. Contexts must
    be in the model's (standardised) latent space.
    """
    d = dit.config.latent_dim
    grid = inference_grid(schedule, steps)
    noise = [gaussian_sample((n, d), rng).data for n in target_lens]
    guided = any(c is not None for c in contexts)
    ctx = [np.zeros((0, d), np.float32) if c is None else np.asarray(c, np.float32) for c in contexts]
    nulls = [np.zeros_like(c) for c in ctx]
    calls_before = dit.forward_calls

    def run(cs, zs, t):
        packed = pack(cs, zs, d)
        with no_grad():
            v = dit.forward(packed.x, packed.valid, np.full(len(zs), t)).data
        return unpack_targets(v, packed)

    def velocity(z_flat, k, t):
        zs = _split_rows(z_flat, target_lens)
        v_null = run(nulls, zs, t)
        if not guided:
            return np.concatenate(v_null, axis=0)
        v_cond = run(ctx, zs, t)
        out = []
        for c, vn, vc in zip(contexts, v_null, v_cond):
            out.append(vn if c is None else combine_guidance(vn, vc, w))
        return np.concatenate(out, axis=0)

    z_init = np.concatenate(noise, axis=0) if noise else np.zeros((0, d), np.float32)
    if sum(target_lens) == 0:
        return SampleResult([np.zeros((0, d), np.float32) for _ in target_lens], 0, {}, grid)
    z, trace = euler_integrate(velocity, z_init, grid, trace_at)
    nfe = dit.forward_calls - calls_before
    return SampleResult(
        _split_rows(z, target_lens),
        nfe,
        {k: _split_rows(v, target_lens) for k, v in trace.items()},
        grid,
    )


def euler_sample(dit: DiT, z_c, target_len: int, steps: int, w: float, rng, schedule: Schedule = Schedule(), trace_at=()):
    """Single-prompt sampler; returns ``(latents, nfe, trace)``."""
    res = euler_sample_batch(dit, [z_c], [target_len], steps, w, rng, schedule, trace_at)
    return res.latents[0], res.nfe, {k: v[0] for k, v in res.trace.items()}


def _split_rows(z: np.ndarray, lens: Sequence[int]) -> list[np.ndarray]:
    return np.split(z, np.cumsum(lens)[:-1], axis=0)
