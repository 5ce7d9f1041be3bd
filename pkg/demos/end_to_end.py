"""Train both stages on the toy grammar, then continue a few prompts.

    python demos/end_to_end.py            # a few minutes on one core
    python demos/end_to_end.py --quick    # seconds, output is noise

The settings are a smaller version of the acceptance runs (a lighter DiT
and fewer steps), so the demo finishes quickly.
"""

import argparse
import logging

from textldm.corpus import build_vocab, generate_synthetic_corpus
from textldm.evalkit import EvalConfig, continuation_eval
from textldm.flowdiff import DiTConfig
from textldm.pipeline import LatentGenerator, denoising_trace, generate_text
from textldm.rng import make_stream
from textldm.textvae import VaeConfig
from textldm.trainer import DitTrainConfig, TrainConfig, train_dit, train_vae
from textldm.transformer import TransformerConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    vae_steps, dit_steps = (20, 20) if args.quick else (400, 600)
    docs = generate_synthetic_corpus(2400, seed=0)
    vocab = build_vocab(docs)
    train, heldout, test = docs[:2000], docs[2000:2200], docs[2200:2300]
    print(f"vocabulary: {len(vocab)} tokens; e.g. {train[0]!r}")

    backbone = TransformerConfig(layers=2, model_dim=64, heads=4)
    vae = train_vae(
        train, vocab,
        VaeConfig(vocab_size=len(vocab), encoder=backbone, decoder=backbone),
        TrainConfig(steps=vae_steps, lr=1e-3, eval_every=100),
    ).model

    dit = train_dit(
        vae, train, vocab,
        DiTConfig(latent_dim=16, backbone=TransformerConfig(layers=3, model_dim=96, heads=4)),
        DitTrainConfig(steps=dit_steps, batch=32, lr=1e-3, eval_every=100),
        heldout=heldout,
    ).model

    gen = LatentGenerator(vae, dit, steps=50, cfg=7.0)
    rng = make_stream(0, "demo")
    for prompt in ("the red cat", "a small dog saw", "the bird"):
        print(f"{prompt!r:>20} -> {generate_text(gen, vocab, prompt, 8, rng)!r}")
    print("unconditional:", generate_text(gen, vocab, None, 10, rng))

    print("\ndenoising trace for 'the big dog':")
    for step, level, text in denoising_trace(gen, vocab, "the big dog", 8, rng, [0, 10, 25, 40, 50]):
        print(f"  step {step:2d}  noise {level:.3f}  {text}")

    report = continuation_eval(test, vocab, gen, EvalConfig())
    print(f"\nROUGE-1/2/L on {len(test)} held-out documents: "
          f"{report.rouge1:.3f} / {report.rouge2:.3f} / {report.rougeL:.3f}, NFE {report.nfe}")


if __name__ == "__main__":
    main()
