"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale training runs are shared through session fixtures so the
whole file stays well inside the per-criterion runtime budgets. Run with
``pytest tests/test_acceptance.py -v -s`` to see the verdict lines inline;
they are repeated in the terminal summary either way.
"""

import io
import itertools
import statistics
import time

import numpy as np
import pytest
from scipy import stats

from textldm.checkpoint import load_checkpoint, save_checkpoint
from textldm.cli import run as cli_run
from textldm.corpus import (
    build_vocab,
    decode,
    encode_document,
    generate_synthetic_corpus,
    grammar_unigram_probs,
    pad_batch,
)
from textldm.evalkit import (
    EvalConfig,
    chance_rouge1_f1,
    continuation_eval,
    lcs_length,
    reconstruction_accuracy,
    rouge_l,
    rouge_n,
    unigram_tv_distance,
)
from textldm.flowdiff import (
    DiT,
    DiTConfig,
    Schedule,
    cfm_training_loss,
    draw_cfm_batch,
    euler_integrate,
    euler_sample_batch,
    guided_velocity,
    inference_grid,
    model_velocity,
    null_condition,
    sample_timestep,
)
from textldm.gradcheck import check_parameters
from textldm.pipeline import LatentGenerator
from textldm.rng import make_stream
from textldm.tensor import Tensor, no_grad
from textldm.textvae import Posterior, TextVAE, VaeConfig, kl_divergence
from textldm.trainer import DitTrainConfig, TrainConfig, train_dit, train_vae, vae_from_checkpoint
from textldm.transformer import TransformerConfig

# desk-scale setup shared by criteria 3, 4 and 10
N_DOCS, N_TRAIN, N_HELDOUT, N_TEST = 3000, 2500, 200, 200
MAX_LEN = 49
VAE_BACKBONE = TransformerConfig(layers=2, model_dim=64, heads=4)
VAE_STEPS = 3000
DIT_BACKBONE = TransformerConfig(layers=4, model_dim=128, heads=4)
DIT_STEPS = 1500


@pytest.fixture(scope="session")
def corpus():
    docs = generate_synthetic_corpus(N_DOCS, 0)
    vocab = build_vocab(docs)
    train = docs[:N_TRAIN]
    heldout = docs[N_TRAIN : N_TRAIN + N_HELDOUT]
    test = docs[N_TRAIN + N_HELDOUT : N_TRAIN + N_HELDOUT + N_TEST]
    return train, heldout, test, vocab


def _train_desk_vae(corpus, lam):
    train, _, _, vocab = corpus
    cfg = VaeConfig(vocab_size=len(vocab), latent_dim=16, encoder=VAE_BACKBONE, decoder=VAE_BACKBONE, lam=lam)
    start = time.perf_counter()
    run = train_vae(train, vocab, cfg, TrainConfig(steps=VAE_STEPS, lr=1e-3, eval_every=20, seed=0))
    return run, time.perf_counter() - start


@pytest.fixture(scope="session")
def vae_run(corpus):
    return _train_desk_vae(corpus, 1.0)


@pytest.fixture(scope="session")
def vae_run_no_repa(corpus):
    return _train_desk_vae(corpus, 0.0)


@pytest.fixture(scope="session")
def dit_run(corpus, vae_run):
    train, heldout, _, vocab = corpus
    start = time.perf_counter()
    run = train_dit(vae_run[0].model, train, vocab, DiTConfig(latent_dim=16, backbone=DIT_BACKBONE),
                    DitTrainConfig(steps=DIT_STEPS, batch=32, lr=1e-3, eval_every=100, seed=0), heldout=heldout)
    return run, time.perf_counter() - start


def heldout_ce(model, docs, vocab, seeds=8):
    """Held-out reconstruction cross-entropy, averaged over reparameterisation draws."""
    ids, mask = pad_batch([encode_document(d, vocab, MAX_LEN) for d in docs])
    with no_grad():
        return float(np.mean([model.training_loss(ids, mask, make_stream(s, "eval")).ce.item() for s in range(seeds)]))


# -- 1 ----------------------------------------------------------------------------------------

def test_c01_gradient_oracle(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        vocab_size, d, dim = int(rng.integers(6, 12)), int(rng.integers(2, 5)), 4 * int(rng.integers(1, 4))
        small = TransformerConfig(layers=1, model_dim=dim, heads=2)
        vae = TextVAE(VaeConfig(vocab_size=vocab_size, latent_dim=d, encoder=small, decoder=small,
                                beta=0.5, teacher=TransformerConfig(layers=3, model_dim=8, heads=2)), seed=seed)
        length = int(rng.integers(2, 6))
        ids = rng.integers(4, vocab_size, size=(2, length))
        mask = np.ones(ids.shape, dtype=bool)
        mask[1, int(rng.integers(1, length + 1)):] = False
        ids[~mask] = 0
        vae_loss = lambda: vae.training_loss(ids, mask, make_stream(seed, "noise")).total  # noqa: E731
        errs = check_parameters(vae_loss, vae.parameters(), max_entries=8, rng=rng)
        worst = max(worst, max(errs.values()))

        dit = DiT(DiTConfig(latent_dim=d, backbone=small), seed=seed)
        dit.out_proj["w"].data = rng.normal(0, 0.5, size=dit.out_proj["w"].shape).astype(np.float32)
        contexts = [rng.normal(size=(int(m), d)).astype(np.float32) for m in rng.integers(0, 4, size=3)]
        targets = [rng.normal(size=(int(n), d)).astype(np.float32) for n in rng.integers(1, 5, size=3)]
        draws = draw_cfm_batch(targets, Schedule(), 0.5, make_stream(seed, "flow"))
        cfm_loss = lambda: cfm_training_loss(dit, contexts, targets, Schedule(), 0.5, draws=draws)  # noqa: E731
        errs = check_parameters(cfm_loss, dit.parameters(), max_entries=8, rng=rng)
        worst = max(worst, max(errs.values()))
    took = time.perf_counter() - start
    criterion(1, "gradient oracle", worst <= 1e-3 and took < 60,
              f"max rel err {worst:.2e} (<= 1e-3) over 20 seeds, {took:.1f}s")


# -- 2 ----------------------------------------------------------------------------------------

def test_c02_kl_oracle(criterion):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        shape = (1, int(rng.integers(1, 4)), int(rng.integers(2, 9)))
        mu = rng.normal(0, 1, size=shape)
        log_var = rng.normal(0, 0.7, size=shape)
        post = Posterior(Tensor(mu), Tensor(log_var), Tensor(np.zeros(shape)), np.ones(shape[:2], dtype=bool))
        closed = kl_divergence(post).item()
        # Monte Carlo: E_q[log q(z) - log p(z)] summed over channels, averaged over positions
        std = np.exp(0.5 * log_var)
        z = mu + std * rng.standard_normal((100_000,) + shape)
        log_ratio = stats.norm.logpdf(z, mu, std) - stats.norm.logpdf(z)
        mc = log_ratio.sum(axis=-1).mean(axis=-1).mean()
        worst = max(worst, abs(closed - mc) / abs(mc))
    criterion(2, "KL oracle", worst <= 0.02, f"max rel diff {worst:.4f} (<= 0.02) on 10 posteriors")


# -- 3 ----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c03_vae_reconstruction(criterion, corpus, vae_run):
    _, heldout, _, vocab = corpus
    run, took = vae_run
    ids, mask = pad_batch([encode_document(d, vocab, MAX_LEN) for d in heldout])
    acc_mean = reconstruction_accuracy(ids, run.model.reconstruct(ids, mask), mask)
    # also with a sampled latent, the stricter reading
    with no_grad():
        post = run.model.encode(ids, mask)
        z = post.mu + Tensor(np.exp(0.5 * post.log_var.data) * make_stream(0, "recon").standard_normal(post.mu.shape))
        acc_sampled = reconstruction_accuracy(ids, run.model.decode(z, mask).data, mask)
    ok = min(acc_mean, acc_sampled) >= 0.99 and took <= 600
    criterion(3, "VAE reconstruction", ok,
              f"held-out accuracy {acc_mean:.4f} (means), {acc_sampled:.4f} (sampled) (>= 0.99) "
              f"after {VAE_STEPS} steps, {took:.0f}s")


# -- 4 ----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c04_repa_decoupling(criterion, corpus, vae_run, vae_run_no_repa):
    _, heldout, _, vocab = corpus
    (with_repa, t1), (without, t0) = vae_run, vae_run_no_repa
    best_repa = min(r["repa"] for r in with_repa.history)
    ce1, ce0 = heldout_ce(with_repa.model, heldout, vocab), heldout_ce(without.model, heldout, vocab)
    rel = abs(ce1 - ce0) / ce0
    ok = best_repa <= -0.9 and rel <= 0.10 and t0 + t1 <= 1200
    criterion(4, "REPA decoupling", ok,
              f"min L_REPA {best_repa:.3f} (<= -0.9); held-out CE {ce1:.5f} vs {ce0:.5f} without REPA, "
              f"rel diff {rel:.1%} (<= 10%), {t0 + t1:.0f}s")


# -- 5 ----------------------------------------------------------------------------------------

def test_c05_straight_flow(criterion):
    rng = np.random.default_rng(5)
    z0 = rng.standard_normal((7, 16))
    z_tgt = rng.standard_normal((7, 16))
    field = lambda z, k, t: z_tgt - z0  # noqa: E731
    errs = {}
    for kind in ("logit_normal", "uniform"):
        for steps in (1, 50):
            z, _ = euler_integrate(field, z0, inference_grid(Schedule(kind), steps))
            errs[kind, steps] = z
    recon = max(np.abs(z - z_tgt).max() for z in errs.values())
    agree = max(np.abs(errs[k, 1] - errs[k, 50]).max() for k in ("logit_normal", "uniform"))
    criterion(5, "straight-flow exactness", recon <= 1e-5 and agree <= 1e-5,
              f"max |z - z_tgt| {recon:.1e}, max |K=1 - K=50| {agree:.1e} (<= 1e-5)")


# -- 6 ----------------------------------------------------------------------------------------

def test_c06_cfg_identities(criterion):
    dit = DiT(DiTConfig(latent_dim=4, backbone=TransformerConfig(layers=2, model_dim=16, heads=2)), seed=3)
    rng = np.random.default_rng(6)
    dit.out_proj["w"].data = rng.normal(0, 0.5, size=dit.out_proj["w"].shape).astype(np.float32)
    z_t = rng.standard_normal((5, 4)).astype(np.float32)
    z_c = rng.standard_normal((3, 4)).astype(np.float32)
    with no_grad():
        v_cond = model_velocity(dit, z_t, 0.3, z_c).data
        v_null = model_velocity(dit, z_t, 0.3, null_condition(z_c)).data
    one = guided_velocity(dit, z_t, 0.3, z_c, 1.0)
    zero = guided_velocity(dit, z_t, 0.3, z_c, 0.0)
    ok = one.tobytes() == v_cond.tobytes() and zero.tobytes() == v_null.tobytes() and not np.array_equal(v_cond, v_null)
    criterion(6, "CFG degeneracies", ok, "w=1 == conditional and w=0 == unconditional, bit-exact")


# -- 7 ----------------------------------------------------------------------------------------

def test_c07_schedule(criterion):
    schedule = Schedule("logit_normal", 1.5)
    draws = sample_timestep(schedule, make_stream(7, "schedule"), 100_000)
    ks = stats.kstest(draws, schedule.cdf).statistic
    grid = inference_grid(schedule, 50)
    normal = statistics.NormalDist(0.0, 1.5)
    closed = [1.0] + [1.0 / (1.0 + np.exp(-normal.inv_cdf(k / 50))) for k in range(49, 0, -1)] + [0.0]
    grid_err = float(np.abs(grid - np.array(closed)).max())
    criterion(7, "schedule correctness", ks < 0.01 and grid_err <= 1e-9,
              f"KS {ks:.4f} (< 0.01), K=50 grid max err {grid_err:.1e} (<= 1e-9)")


# -- 8 ----------------------------------------------------------------------------------------

def test_c08_condition_dropout(criterion):
    rng = make_stream(8, "flow")
    targets = [np.zeros((1, 4), np.float32)] * 32
    rate = float(np.mean([draw_cfm_batch(targets, Schedule(), 0.1, rng).dropped.mean() for _ in range(10_000)]))
    criterion(8, "condition dropout", abs(rate - 0.10) <= 0.01, f"rate {rate:.4f} over 10^4 batches (0.10 +- 0.01)")


# -- 9 ----------------------------------------------------------------------------------------

def test_c09_leakage(criterion):
    small = TransformerConfig(layers=2, model_dim=16, heads=2)
    vae = TextVAE(VaeConfig(vocab_size=27, latent_dim=4, encoder=small, decoder=small,
                            teacher=TransformerConfig(layers=3, model_dim=8, heads=2)), seed=9)
    rng = np.random.default_rng(9)
    identical = True
    for _ in range(50):
        ctx = rng.integers(4, 27, size=int(rng.integers(1, 10)))
        a, _ = vae.encode_split(ctx, rng.integers(4, 27, size=int(rng.integers(0, 10))))
        b, _ = vae.encode_split(ctx, rng.integers(4, 27, size=int(rng.integers(0, 10))))
        identical &= a.mu.data.tobytes() == b.mu.data.tobytes() and a.log_var.data.tobytes() == b.log_var.data.tobytes()
    criterion(9, "context leakage", identical, "context latents bit-identical under 50 target perturbations")


# -- 10 ---------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_end_to_end(criterion, corpus, vae_run, dit_run):
    train, _, test, vocab = corpus
    vae = vae_run[0].model
    dit, took = dit_run[0].model, dit_run[1] + vae_run[1]
    start = time.perf_counter()
    gen = LatentGenerator(vae, dit, steps=50, cfg=7.0)
    rep = continuation_eval(test, vocab, gen, EvalConfig(seed=0))
    # chance: a generator drawing uniformly over the grammar's words at the reference length
    lengths = [(len(s["reference"].split()),) * 2 for s in rep.samples]
    uniform = {w: 1.0 / len(grammar_unigram_probs()) for w in grammar_unigram_probs()}
    chance = chance_rouge1_f1(grammar_unigram_probs(), uniform, lengths)
    # unconditional samples at the corpus' own lengths
    lens = [len(encode_document(d, vocab, MAX_LEN)) for d in test[:100]]
    res = euler_sample_batch(dit, [None] * len(lens), lens, 50, 7.0, make_stream(10, "uncond"))
    texts = [decode(ids, vocab, stop_at_eos=True) for ids in gen.decode_latents(res.latents)]
    tv = unigram_tv_distance(texts, train)
    took += time.perf_counter() - start
    margin = rep.rouge1 - chance
    ok = tv < 0.15 and margin >= 0.10 and took <= 1800
    criterion(10, "end-to-end generation", ok,
              f"unconditional TV {tv:.3f} (< 0.15); ROUGE-1 {rep.rouge1:.3f} vs chance {chance:.3f}, "
              f"margin {margin:.3f} (>= 0.10); {DIT_STEPS} DiT steps, {took:.0f}s")


# -- 11 ---------------------------------------------------------------------------------------

def test_c11_nfe(criterion):
    dit = DiT(DiTConfig(latent_dim=4, backbone=TransformerConfig(layers=1, model_dim=8, heads=2)), seed=11)
    steps = 10
    ctx = np.random.default_rng(11).standard_normal((5, 4)).astype(np.float32)
    counts = {n: euler_sample_batch(dit, [ctx], [n], steps, 7.0, make_stream(n, "nfe")).nfe for n in (8, 32, 128)}
    criterion(11, "NFE contract", all(c == 2 * steps for c in counts.values()),
              f"NFE {counts} at K={steps} (expected {2 * steps})")


# -- 12 ---------------------------------------------------------------------------------------

def _brute_lcs(a, b):
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for r in range(len(a), 0, -1):
        if any(is_subseq(c, b) for c in itertools.combinations(a, r)):
            return r
    return 0


def test_c12_rouge_oracle(criterion):
    def triple(s):
        return (s.precision, s.recall, s.f1)

    examples = [
        (triple(rouge_n("the cat sat", "the cat sat", 1)), (1.0, 1.0, 1.0)),
        (triple(rouge_n("a b", "c d", 1)), (0.0, 0.0, 0.0)),
        (triple(rouge_n("the cat sat", "the cat ran", 1)), (2 / 3, 2 / 3, 2 / 3)),
        (triple(rouge_l("a b c", "a b c")), (1.0, 1.0, 1.0)),
        (triple(rouge_l("a b c d", "a c")), (1.0, 0.5, 2 / 3)),
        (triple(rouge_l("a b", "")), (0.0, 0.0, 0.0)),
    ]
    hand = all(got == want for got, want in examples)
    rng = np.random.default_rng(12)
    mismatches = 0
    for _ in range(200):
        a = list(rng.integers(0, 4, size=rng.integers(0, 9)))
        b = list(rng.integers(0, 4, size=rng.integers(0, 9)))
        mismatches += lcs_length(a, b) != _brute_lcs(a, b)
    criterion(12, "ROUGE oracle", hand and mismatches == 0,
              f"{len(examples)} hand examples exact: {hand}; LCS mismatches on 200 pairs: {mismatches}")


# -- 13 ---------------------------------------------------------------------------------------

def _cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli_run(list(argv), out, err)
    return code, out.getvalue()


def test_c13_determinism(criterion, tmp_path):
    vae_flags = ["--steps", "5", "--batch", "4", "--enc-layers", "1", "--dec-layers", "1", "--dim", "16",
                 "--heads", "2", "--latent-dim", "4", "--repa-layer-offset", "-1"]
    dit_flags = ["--steps", "5", "--batch", "4", "--layers", "1", "--dim", "16", "--heads", "2"]
    _cli("make-corpus", "--out", str(tmp_path / "c.txt"), "--n-docs", "60")
    same = True
    for tag in ("a", "b"):
        _cli("train-vae", "--corpus", str(tmp_path / "c.txt"), "--out", str(tmp_path / f"vae_{tag}.ckpt"), *vae_flags)
        _cli("train-dit", "--corpus", str(tmp_path / "c.txt"), "--vae", str(tmp_path / f"vae_{tag}.ckpt"),
             "--out", str(tmp_path / f"dit_{tag}.ckpt"), *dit_flags)
    for kind in ("vae", "dit"):
        same &= (tmp_path / f"{kind}_a.ckpt").read_bytes() == (tmp_path / f"{kind}_b.ckpt").read_bytes()
    sample = ["sample", "--vae", str(tmp_path / "vae_a.ckpt"), "--dit", str(tmp_path / "dit_a.ckpt"),
              "--prompt", "the red cat", "--len", "8", "--seed", "4"]
    first, second = _cli(*sample), _cli(*sample)
    stdout_same = first[0] == 0 and first == second

    # save -> load -> loss, bit for bit
    model, vocab = vae_from_checkpoint(load_checkpoint(tmp_path / "vae_a.ckpt"))
    save_checkpoint(load_checkpoint(tmp_path / "vae_a.ckpt"), tmp_path / "vae_c.ckpt")
    again, _ = vae_from_checkpoint(load_checkpoint(tmp_path / "vae_c.ckpt"))
    ids = np.array([encode_document("the red cat sat .", vocab, MAX_LEN)])
    with no_grad():
        la = model.training_loss(ids, None, make_stream(0, "noise")).total.data
        lb = again.training_loss(ids, None, make_stream(0, "noise")).total.data
    round_trip = la.tobytes() == lb.tobytes()
    round_trip &= (tmp_path / "vae_a.ckpt").read_bytes() == (tmp_path / "vae_c.ckpt").read_bytes()
    criterion(13, "determinism and persistence", same and stdout_same and round_trip,
              f"checkpoints identical: {same}; stdout identical: {stdout_same}; loss round trip exact: {round_trip}")
