"""Metrics and the continuation-evaluation protocol."""

from __future__ import annotations

import hashlib
import json
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import binom

from .corpus import Vocabulary, decode, encode_document, split_document
from .rng import make_stream


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, n_hyp: int, n_ref: int) -> "RougeScore":
        p = overlap / n_hyp if n_hyp else 0.0
        r = overlap / n_ref if n_ref else 0.0
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        return cls(p, r, f)


def normalize(text) -> list[str]:
    """Lowercased whitespace tokens; token lists pass through lowercased."""
    words = text.split() if isinstance(text, str) else list(text)
    return [str(w).lower() for w in words]


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def rouge_n(reference, hypothesis, n: int = 1) -> RougeScore:
    """Clipped n-gram overlap."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ref, hyp = _ngrams(normalize(reference), n), _ngrams(normalize(hypothesis), n)
    overlap = sum((ref & hyp).values())
    return RougeScore.from_counts(overlap, sum(hyp.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence by dynamic programming, O(len(a) len(b))."""
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(reference, hypothesis) -> RougeScore:
    ref, hyp = normalize(reference), normalize(hypothesis)
    return RougeScore.from_counts(lcs_length(ref, hyp), len(hyp), len(ref))


def reconstruction_accuracy(tokens, logits, mask=None) -> float:
    """Fraction of unmasked positions whose argmax logit is the token."""
    tokens = np.asarray(tokens)
    logits = np.asarray(logits.data if hasattr(logits, "data") else logits)
    if logits.shape[:-1] != tokens.shape:
        raise ValueError(f"logits {logits.shape} do not match tokens {tokens.shape}")
    mask = np.ones(tokens.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    hits = (logits.argmax(axis=-1) == tokens) & mask
    return float(hits.sum() / max(mask.sum(), 1))


def unigram_tv_distance(samples: Sequence[str], corpus: Sequence[str]) -> float:
    """Total-variation distance between the two empirical word distributions."""
    a = Counter(w for s in samples for w in normalize(s))
    b = Counter(w for s in corpus for w in normalize(s))
    na, nb = sum(a.values()), sum(b.values())
    if not na or not nb:
        raise ValueError("unigram_tv_distance needs nonempty samples and corpus")
    return 0.5 * sum(abs(a[w] / na - b[w] / nb) for w in set(a) | set(b))


def expected_overlap(ref_probs: dict[str, float], hyp_probs: dict[str, float], n_ref: int, n_hyp: int) -> float:
    """``E[sum_w min(R_w, H_w)]`` for independent multinomial bags of words.

    Each word's count is binomial, so the expectation is a finite sum over
    the two count pmfs.
    """
    total = 0.0
    kr, kh = np.arange(n_ref + 1), np.arange(n_hyp + 1)
    mins = np.minimum.outer(kr, kh)
    for w in set(ref_probs) & set(hyp_probs):
        pr = binom.pmf(kr, n_ref, ref_probs[w])
        ph = binom.pmf(kh, n_hyp, hyp_probs[w])
        total += float(pr @ mins @ ph)
    return total


def chance_rouge1_f1(ref_probs: dict[str, float], hyp_probs: dict[str, float], lengths: Sequence[tuple[int, int]]) -> float:
    """Mean expected ROUGE-1 F1 of a bag-of-words generator over (ref, hyp) lengths."""
    vals = []
    for n_ref, n_hyp in lengths:
        if n_ref + n_hyp == 0:
            continue
        vals.append(2.0 * expected_overlap(ref_probs, hyp_probs, n_ref, n_hyp) / (n_ref + n_hyp))
    return float(np.mean(vals)) if vals else 0.0


# -- continuation protocol ------------------------------------------------------------

Generator = Callable[[list[np.ndarray], list[int], np.random.Generator], tuple[list[np.ndarray], list[int]]]


@dataclass
class EvalConfig:
    steps: int = 50
    cfg: float = 7.0
    split_lo: float = 0.4
    split_hi: float = 0.6
    seed: int = 0
    max_len: int = 49
    batch: int = 32

    def digest(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    samples: list[dict] = field(default_factory=list)
    rouge1: float = 0.0
    rouge2: float = 0.0
    rougeL: float = 0.0
    recon_accuracy: float | None = None
    nfe: int = 0
    wall_time: float = 0.0
    config_hash: str = ""

    def to_text(self) -> str:
        """Key-value header then a tab-separated per-sample table.

        Wall time is left out so that the text is reproducible.
        """
        head = {
            "samples": len(self.samples),
            "rouge1_f1": f"{self.rouge1:.6f}",
            "rouge2_f1": f"{self.rouge2:.6f}",
            "rougeL_f1": f"{self.rougeL:.6f}",
            "recon_accuracy": "n/a" if self.recon_accuracy is None else f"{self.recon_accuracy:.6f}",
            "nfe": self.nfe,
            "config_hash": self.config_hash,
        }
        lines = [f"{k} = {v}" for k, v in head.items()]
        lines.append("")
        cols = ["index", "nfe", "rouge1_f1", "rouge2_f1", "rougeL_f1", "context", "reference", "hypothesis"]
        lines.append("\t".join(cols))
        for s in self.samples:
            lines.append("\t".join(f"{s[c]:.6f}" if isinstance(s[c], float) else str(s[c]) for c in cols))
        return "\n".join(lines) + "\n"


def continuation_eval(
    testset: Sequence[str],
    vocab: Vocabulary,
    generator: Generator,
    config: EvalConfig = EvalConfig(),
    recon: Callable[[Sequence[np.ndarray]], float] | None = None,
) -> EvalReport:
    """Split each test document at a uniform 40-60% point, generate a
    continuation of the reference length and score it with ROUGE.

    Generated text is cut at the first EOS before scoring.
    """
    if not testset:
        raise ValueError("empty test set")
    start = time.perf_counter()
    rng = make_stream(config.seed, "eval.split")
    gen_rng = make_stream(config.seed, "eval.noise")
    docs = [encode_document(d, vocab, config.max_len) for d in testset]
    splits = [split_document(d, rng, config.split_lo, config.split_hi, p_full=0.0) for d in docs]
    outputs, nfes = [], []
    for i in range(0, len(splits), config.batch):
        chunk = splits[i : i + config.batch]
        ids, nfe = generator([s.context for s in chunk], [len(s.target) for s in chunk], gen_rng)
        outputs.extend(ids)
        nfes.extend(nfe)
    report = EvalReport(config_hash=config.digest())
    for i, (s, out, nfe) in enumerate(zip(splits, outputs, nfes)):
        ref = decode(s.target, vocab, stop_at_eos=True)
        hyp = decode(out, vocab, stop_at_eos=True)
        report.samples.append({
            "index": i,
            "nfe": int(nfe),
            "rouge1_f1": rouge_n(ref, hyp, 1).f1,
            "rouge2_f1": rouge_n(ref, hyp, 2).f1,
            "rougeL_f1": rouge_l(ref, hyp).f1,
            "context": decode(s.context, vocab, stop_at_eos=True),
            "reference": ref,
            "hypothesis": hyp,
        })
    for key, attr in (("rouge1_f1", "rouge1"), ("rouge2_f1", "rouge2"), ("rougeL_f1", "rougeL")):
        setattr(report, attr, float(np.mean([s[key] for s in report.samples])))
    report.nfe = max(nfes) if nfes else 0
    if recon is not None:
        report.recon_accuracy = recon(docs)
    report.wall_time = time.perf_counter() - start
    return report


def oracle_generator(truth: dict[tuple, np.ndarray]) -> Generator:
    """Generator returning the stored ground-truth continuation for a context."""

    def gen(contexts, lens, rng):
        return [truth[tuple(c.tolist())][:n] for c, n in zip(contexts, lens)], [0] * len(contexts)

    return gen


def random_generator(vocab: Vocabulary, words: Sequence[str] | None = None) -> Generator:
    """Uniform i.i.d. draws over ``words`` (default: every non-reserved token)."""
    pool = np.array([vocab.index[w] for w in (words or vocab.tokens[4:])])

    def gen(contexts, lens, rng):
        return [pool[rng.integers(len(pool), size=n)] for n in lens], [0] * len(contexts)

    return gen

