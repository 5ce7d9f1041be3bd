"""Toy-grammar corpus, word vocabulary and the two batch regimes.

The VAE sees randomly truncated windows of documents; the DiT sees
documents split into a context prefix and a target continuation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .rng import make_stream

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

DETERMINERS = ("the", "a")
ADJECTIVES = ("red", "blue", "small", "big", "old", "new")
NOUNS = ("cat", "dog", "bird", "car", "house", "tree", "boat", "book")
VERBS = ("chased", "saw", "liked", "found", "pushed", "followed")
TEMPLATE = (DETERMINERS, ADJECTIVES, NOUNS, VERBS, DETERMINERS, ADJECTIVES, NOUNS, (".",))
SENTENCES_PER_DOC = (2, 6)


def generate_synthetic_corpus(n_docs: int, seed: int) -> list[str]:
    """Documents of 2-6 template sentences, every slot drawn uniformly."""
    rng = make_stream(seed, "corpus")
    docs = []
    for _ in range(n_docs):
        n_sent = int(rng.integers(SENTENCES_PER_DOC[0], SENTENCES_PER_DOC[1] + 1))
        words = []
        for _ in range(n_sent):
            words.extend(slot[int(rng.integers(len(slot)))] for slot in TEMPLATE)
        docs.append(" ".join(words))
    return docs


def parse_document(text: str) -> bool:
    """True iff ``text`` is one or more template sentences."""
    words = text.split()
    if not words or len(words) % len(TEMPLATE):
        return False
    return all(w in TEMPLATE[i % len(TEMPLATE)] for i, w in enumerate(words))


def grammar_unigram_probs() -> dict[str, float]:
    """Per-word frequency implied by the template (independent of doc length)."""
    probs: dict[str, float] = {}
    for slot in TEMPLATE:
        for w in slot:
            probs[w] = probs.get(w, 0.0) + 1.0 / (len(TEMPLATE) * len(slot))
    return probs


def read_corpus(path) -> list[str]:
    """One document per line (UTF-8); blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def write_corpus(docs: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(doc + "\n")


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the 4 reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(corpus: Sequence[str]) -> Vocabulary:
    """Reserved ids 0..3, then distinct words in first-occurrence order."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    tokens = list(RESERVED)
    seen = set(tokens)
    for doc in corpus:
        for w in doc.split():
            if w not in seen:
                seen.add(w)
                tokens.append(w)
    return Vocabulary(tokens)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.index.get(w, UNK) for w in text.split()]


def decode(ids, vocab: Vocabulary, stop_at_eos: bool = False) -> str:
    """Map ids back to words. PAD/BOS are dropped; with ``stop_at_eos``
    everything from the first EOS on is cut."""
    words = []
    for i in ids:
        i = int(i)
        if i == EOS and stop_at_eos:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


def encode_document(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """Token ids plus a closing EOS, cut to ``max_len``."""
    return np.array((encode(text, vocab) + [EOS])[:max_len], dtype=np.int64)


def pad_batch(seqs: Sequence[Sequence[int]], width: int | None = None):
    """Right-pad to a common width; returns ``(ids, mask)``."""
    width = max((len(s) for s in seqs), default=0) if width is None else width
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


@dataclass
class VaeBatch:
    ids: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray


def batch_iterator_vae(
    corpus: Sequence[str],
    vocab: Vocabulary,
    batch: int,
    max_len: int,
    seed: int,
    min_len: int = 4,
    truncate: bool = True,
) -> Iterator[VaeBatch]:
    """Endless stream of randomly truncated document windows.

    Each sequence keeps a window whose length is uniform on
    ``[min(min_len, N), N]`` at a uniform start offset.
    """
    docs = [encode_document(d, vocab, max_len) for d in corpus]
    rng = make_stream(seed, "data.vae")
    while True:
        picks = rng.integers(len(docs), size=batch)
        seqs = []
        for j in picks:
            doc = docs[int(j)]
            n = len(doc)
            if truncate:
                lo = min(min_len, n)
                length = int(rng.integers(lo, n + 1))
                start = int(rng.integers(0, n - length + 1))
                doc = doc[start : start + length]
            seqs.append(doc)
        ids, mask = pad_batch(seqs)
        yield VaeBatch(ids, mask, mask.sum(axis=1))


@dataclass
class SplitSample:
    context: np.ndarray
    target: np.ndarray


def split_document(ids: np.ndarray, rng: np.random.Generator, split_lo=0.4, split_hi=0.6, p_full=0.1) -> SplitSample:
    """Draw a context/target split; with prob ``p_full`` the context is empty."""
    n = len(ids)
    if rng.random() < p_full:
        m = 0
    else:
        m = int(np.round(rng.uniform(split_lo, split_hi) * n))
    m = min(m, n - 1) if n > 0 else 0
    return SplitSample(ids[:m], ids[m:])


def batch_iterator_dit(
    corpus: Sequence[str],
    vocab: Vocabulary,
    batch: int,
    max_len: int,
    seed: int,
    split_lo: float = 0.4,
    split_hi: float = 0.6,
    p_full: float = 0.1,
) -> Iterator[list[SplitSample]]:
    """Endless stream of batches of context/target splits."""
    if not 0.0 <= split_lo <= split_hi <= 1.0:
        raise ValueError(f"need 0 <= split_lo <= split_hi <= 1, got {split_lo}, {split_hi}")
    docs = [encode_document(d, vocab, max_len) for d in corpus]
    rng = make_stream(seed, "data.dit")
    while True:
        picks = rng.integers(len(docs), size=batch)
        yield [split_document(docs[int(j)], rng, split_lo, split_hi, p_full) for j in picks]
