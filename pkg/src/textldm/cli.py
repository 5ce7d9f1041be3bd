"""``textldm`` command line: corpus, two-stage training, sampling, traces, eval.

Exit codes: 0 success, 1 usage error, 2 data or checkpoint error.
Option values resolve as command-line flag > ``--config`` file > default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint, parse_kv, save_checkpoint
from .corpus import (
    Vocabulary,
    build_vocab,
    generate_synthetic_corpus,
    pad_batch,
    read_corpus,
    write_corpus,
)
from .evalkit import EvalConfig, continuation_eval, reconstruction_accuracy
from .flowdiff import DiTConfig, Schedule
from .pipeline import LatentGenerator, denoising_trace, generate_text
from .rng import make_stream
from .textvae import VaeConfig
from .trainer import DitTrainConfig, TrainConfig, dit_from_checkpoint, train_dit, train_vae, vae_from_checkpoint
from .transformer import TransformerConfig


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# built-in defaults per command; flags default to None so precedence can be resolved
DEFAULTS = {
    "make-corpus": {"n_docs": 3000, "seed": 0},
    "train-vae": {
        "steps": 5000, "batch": 16, "lr": 1e-4, "weight_decay": 0.01, "latent_dim": 16,
        "enc_layers": 4, "dec_layers": 4, "dim": 128, "heads": 4, "beta": 1e-3, "lambda": 1.0,
        "repa_layer_offset": -3, "kl_warmup": 0.1, "max_len": 49, "seed": 0, "log_every": 100,
        "grad_clip": 1.0,
    },
    "train-dit": {
        "steps": 10000, "batch": 32, "lr": 1e-4, "weight_decay": 0.01, "layers": 6, "dim": 192,
        "heads": 6, "schedule": "logit_normal", "schedule_std": 1.5, "p_uncond": 0.1, "timestep_cond": False,
        "max_len": 49, "seed": 0, "log_every": 100, "grad_clip": 1.0,
    },
    "sample": {"len": 16, "steps": 50, "cfg": 7.0, "seed": 0, "n": 1},
    "trace": {"len": 16, "steps": 50, "cfg": 7.0, "seed": 0, "dump_at": "10,20,30,40,50"},
    "eval": {"steps": 50, "cfg": 7.0, "seed": 0, "n_samples": 0, "batch": 32, "max_len": 49},
}

TYPES = {"n_docs": int, "seed": int, "steps": int, "batch": int, "lr": float, "weight_decay": float,
         "latent_dim": int, "enc_layers": int, "dec_layers": int, "dim": int, "heads": int, "beta": float,
         "lambda": float, "repa_layer_offset": int, "kl_warmup": float, "max_len": int, "log_every": int,
         "grad_clip": float, "layers": int, "schedule": str, "schedule_std": float, "p_uncond": float,
         "timestep_cond": lambda s: str(s).lower() in ("1", "true", "yes", "on"), "len": int, "cfg": float,
         "n": int, "dump_at": str, "n_samples": int}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="textldm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="file of 'key = value' lines")
        return sp

    def opt(sp, flag, dest=None, **kw):
        sp.add_argument(flag, dest=dest, default=None, **kw)

    sp = add("make-corpus", "write the toy-grammar corpus, one document per line")
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab-out")
    opt(sp, "--n-docs", type=int)
    opt(sp, "--seed", type=int)

    sp = add("train-vae", "train the text VAE")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    for flag, typ in [("--steps", int), ("--batch", int), ("--lr", float), ("--weight-decay", float),
                      ("--latent-dim", int), ("--enc-layers", int), ("--dec-layers", int), ("--dim", int),
                      ("--heads", int), ("--beta", float), ("--repa-layer-offset", int), ("--kl-warmup", float),
                      ("--max-len", int), ("--seed", int), ("--log-every", int), ("--grad-clip", float)]:
        opt(sp, flag, type=typ)
    opt(sp, "--lambda", dest="lambda", type=float)

    sp = add("train-dit", "train the latent flow-matching model on a frozen VAE")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--heldout", help="documents used for latent statistics")
    for flag, typ in [("--steps", int), ("--batch", int), ("--lr", float), ("--weight-decay", float),
                      ("--layers", int), ("--dim", int), ("--heads", int), ("--schedule-std", float),
                      ("--p-uncond", float), ("--max-len", int), ("--seed", int), ("--log-every", int),
                      ("--grad-clip", float)]:
        opt(sp, flag, type=typ)
    opt(sp, "--schedule", choices=["uniform", "logit_normal"])
    sp.add_argument("--timestep-cond", action="store_const", const=True, default=None)

    for name, help in (("sample", "generate text"), ("trace", "show the denoising progression")):
        sp = add(name, help)
        sp.add_argument("--vae", required=True)
        sp.add_argument("--dit", required=True)
        sp.add_argument("--prompt")
        sp.add_argument("--unconditional", action="store_true")
        for flag, typ in [("--len", int), ("--steps", int), ("--cfg", float), ("--seed", int)]:
            opt(sp, flag, type=typ)
        if name == "sample":
            opt(sp, "--n", type=int)
        else:
            opt(sp, "--dump-at", type=str)

    sp = add("eval", "continuation evaluation (ROUGE) on a test corpus")
    sp.add_argument("--vae", required=True)
    sp.add_argument("--dit", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", help="also write the report here")
    for flag, typ in [("--steps", int), ("--cfg", float), ("--seed", int), ("--n-samples", int),
                      ("--batch", int), ("--max-len", int)]:
        opt(sp, flag, type=typ)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge flag values over config-file values over built-in defaults."""
    defaults = DEFAULTS[args.command]
    merged = dict(defaults)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read config file {args.config}: {exc}") from exc
        try:
            raw = parse_kv(text, source=args.config)
        except CheckpointError as exc:
            raise DataError(str(exc)) from exc
        for key, value in raw.items():
            k = key.replace("-", "_")
            if k not in defaults:
                raise DataError(f"{args.config}: unknown key {key!r} for command {args.command}")
            try:
                merged[k] = TYPES[k](value)
            except ValueError as exc:
                raise DataError(f"{args.config}: bad value for {key!r}: {value!r}") from exc
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _load_corpus(path) -> list[str]:
    try:
        docs = read_corpus(path)
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    if not docs:
        raise DataError(f"corpus {path} is empty")
    return docs


def _load(path, loader):
    try:
        return loader(load_checkpoint(path))
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except (CheckpointError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _save(ckpt, path):
    try:
        save_checkpoint(ckpt, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def cmd_make_corpus(args, o, out):
    docs = generate_synthetic_corpus(o["n_docs"], o["seed"])
    try:
        write_corpus(docs, args.out)
        if args.vocab_out:
            build_vocab(docs).save(args.vocab_out)
    except OSError as exc:
        raise DataError(f"cannot write corpus: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out.write(f"wrote {len(docs)} documents to {args.out}\n")


def cmd_train_vae(args, o, out):
    docs = _load_corpus(args.corpus)
    vocab = build_vocab(docs)
    enc = TransformerConfig(layers=o["enc_layers"], model_dim=o["dim"], heads=o["heads"], max_positions=max(o["max_len"], 1))
    dec = TransformerConfig(layers=o["dec_layers"], model_dim=o["dim"], heads=o["heads"], max_positions=max(o["max_len"], 1))
    try:
        vcfg = VaeConfig(vocab_size=len(vocab), latent_dim=o["latent_dim"], encoder=enc, decoder=dec,
                         beta=o["beta"], lam=o["lambda"], repa_layer_offset=o["repa_layer_offset"])
        tcfg = TrainConfig(steps=o["steps"], batch=o["batch"], lr=o["lr"], weight_decay=o["weight_decay"],
                           kl_warmup_fraction=o["kl_warmup"], grad_clip=o["grad_clip"], seed=o["seed"],
                           eval_every=o["log_every"], max_len=o["max_len"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    run = train_vae(docs, vocab, vcfg, tcfg, callback=_log_record("vae"))
    _save(run.checkpoint, args.out)
    last = run.history[-1] if run.history else {}
    out.write(f"saved {args.out} " + " ".join(f"{k}={last[k]:.6f}" for k in ("ce", "kl", "repa", "total") if k in last) + "\n")


def cmd_train_dit(args, o, out):
    docs = _load_corpus(args.corpus)
    vae, vocab = _load(args.vae, vae_from_checkpoint)
    heldout = _load_corpus(args.heldout) if args.heldout else None
    try:
        backbone = TransformerConfig(layers=o["layers"], model_dim=o["dim"], heads=o["heads"],
                                     max_positions=max(2 * o["max_len"], 1))
        dcfg = DiTConfig(latent_dim=vae.config.latent_dim, backbone=backbone, timestep_conditioning=o["timestep_cond"])
        tcfg = DitTrainConfig(steps=o["steps"], batch=o["batch"], lr=o["lr"], weight_decay=o["weight_decay"],
                              grad_clip=o["grad_clip"], seed=o["seed"], eval_every=o["log_every"],
                              max_len=o["max_len"], schedule=o["schedule"], schedule_std=o["schedule_std"],
                              p_uncond=o["p_uncond"])
        Schedule(o["schedule"], o["schedule_std"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    run = train_dit(vae, docs, vocab, dcfg, tcfg, heldout=heldout, callback=_log_record("dit"))
    _save(run.checkpoint, args.out)
    out.write(f"saved {args.out} loss={run.history[-1]['loss']:.6f}\n" if run.history else f"saved {args.out}\n")


def _generator(args, o) -> tuple[LatentGenerator, Vocabulary]:
    vae, vocab = _load(args.vae, vae_from_checkpoint)
    dit, meta = _load(args.dit, lambda c: (dit_from_checkpoint(c), c.meta))
    if vae.config.latent_dim != dit.config.latent_dim:
        raise DataError(
            f"latent dim mismatch: {args.vae} has {vae.config.latent_dim}, {args.dit} has {dit.config.latent_dim}"
        )
    if dit.stats is None:
        raise DataError(f"{args.dit} has no latent statistics")
    schedule = Schedule(meta.get("schedule", "logit_normal"), float(meta.get("schedule_std", 1.5)))
    if o["steps"] < 1:
        raise UsageError("--steps must be >= 1")
    if o["cfg"] < 0:
        raise UsageError("--cfg must be >= 0")
    return LatentGenerator(vae, dit, steps=o["steps"], cfg=o["cfg"], schedule=schedule), vocab


def _prompt(args):
    if args.unconditional and args.prompt is not None:
        raise UsageError("--prompt and --unconditional are mutually exclusive")
    if not args.unconditional and args.prompt is None:
        raise UsageError("give --prompt TEXT or --unconditional")
    return None if args.unconditional else args.prompt


def cmd_sample(args, o, out):
    prompt = _prompt(args)
    if o["len"] < 0:
        raise UsageError("--len must be >= 0")
    gen, vocab = _generator(args, o)
    rng = make_stream(o["seed"], "sample")
    for _ in range(o["n"]):
        out.write(generate_text(gen, vocab, prompt, o["len"], rng) + "\n")


def cmd_trace(args, o, out):
    prompt = _prompt(args)
    try:
        dump_at = [int(x) for x in o["dump_at"].split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--dump-at expects comma-separated integers, got {o['dump_at']!r}") from exc
    gen, vocab = _generator(args, o)
    if any(not 0 <= n <= o["steps"] for n in dump_at):
        raise UsageError(f"--dump-at values must lie in [0, {o['steps']}]")
    if prompt is not None:
        out.write(f"cond\t{prompt}\n")
    for n, t, text in denoising_trace(gen, vocab, prompt, o["len"], make_stream(o["seed"], "sample"), dump_at):
        out.write(f"step {n}\t{t:.6f}\t{text}\n")


def cmd_eval(args, o, out):
    docs = _load_corpus(args.corpus)
    if o["n_samples"]:
        docs = docs[: o["n_samples"]]
    gen, vocab = _generator(args, o)
    cfg = EvalConfig(steps=o["steps"], cfg=o["cfg"], seed=o["seed"], max_len=o["max_len"], batch=o["batch"])

    def recon(seqs):
        ids, mask = pad_batch(seqs)
        return reconstruction_accuracy(ids, gen.vae.reconstruct(ids, mask), mask)

    report = continuation_eval(docs, vocab, gen, cfg, recon=recon)
    logging.getLogger(__name__).info("eval wall time %.2fs", report.wall_time)
    text = report.to_text()
    out.write(text)
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as exc:
            raise DataError(f"cannot write {args.out}: {exc}") from exc


def _log_record(stage):
    logger = logging.getLogger("textldm.train")

    def cb(step, rec):
        logger.info("%s step %d %s", stage, step, json.dumps({k: v for k, v in rec.items() if k != "step"}))

    return cb


COMMANDS = {
    "make-corpus": cmd_make_corpus,
    "train-vae": cmd_train_vae,
    "train-dit": cmd_train_dit,
    "sample": cmd_sample,
    "trace": cmd_trace,
    "eval": cmd_eval,
}


def _thread_limit():
    n = os.environ.get("TLDM_THREADS")
    if not n:
        return nullcontext()
    try:
        return threadpool_limits(limits=int(n))
    except ValueError as exc:
        raise UsageError(f"TLDM_THREADS must be an integer, got {n!r}") from exc


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        opts = resolve(args)
        with _thread_limit():
            COMMANDS[args.command](args, opts, stdout)
    except UsageError as exc:
        stderr.write(f"usage error: {exc}\n")
        return 1
    except DataError as exc:
        stderr.write(f"error: {exc}\n")
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run())
