"""Deterministic synthetic text corpus.

Training and the acceptance runs need a fixed corpus; this generator
produces English-like prose that is byte-for-byte reproducible from a
seed, with word-level statistics plus paragraph-level topic reuse so that
longer context genuinely helps prediction.
"""

import numpy as np

from .tokenizer import ByteTokenizer

NOUNS = (
    "river valley mountain forest harbor village market castle garden meadow "
    "library bridge lantern engine compass mill stone tower road shadow "
    "winter summer morning evening letter journey captain merchant scholar "
    "farmer sailor painter clock bell orchard island storm fire snow rain"
).split()
VERBS = (
    "crosses follows watches builds carries remembers describes reaches "
    "guards repairs opens closes gathers measures paints writes studies "
    "trades sails climbs"
).split()
ADJECTIVES = (
    "old quiet bright narrow distant heavy gentle broken silent golden "
    "restless familiar foreign crowded empty ancient early pale stubborn wide"
).split()
ADVERBS = "slowly carefully often rarely quietly eagerly finally almost".split()
CONNECTORS = ("and then", "but soon", "while the rain falls", "before dawn",
              "after the long day", "as always")


def _sentence(rng, topic_nouns, topic_adjs, topic_verbs) -> str:
    def noun():
        pool = topic_nouns if rng.random() < 0.8 else NOUNS
        return pool[rng.integers(len(pool))]

    def verb():
        pool = topic_verbs if rng.random() < 0.7 else VERBS
        return pool[rng.integers(len(pool))]

    def adj():
        pool = topic_adjs if rng.random() < 0.7 else ADJECTIVES
        return pool[rng.integers(len(pool))]

    parts = [f"The {adj()} {noun()} {verb()} the {noun()}"]
    if rng.random() < 0.4:
        parts.append(ADVERBS[rng.integers(len(ADVERBS))])
    if rng.random() < 0.35:
        parts.append(CONNECTORS[rng.integers(len(CONNECTORS))])
        parts.append(f"the {noun()} {verb()} the {adj()} {noun()}")
    sentence = " ".join(parts) + "."
    return sentence[0].upper() + sentence[1:]


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """At least n_bytes of reproducible prose (trimmed to exactly n_bytes)."""
    rng = np.random.default_rng(seed)
    chunks: list[str] = []
    total = 0
    while total < n_bytes:
        topic_nouns = [NOUNS[i] for i in rng.choice(len(NOUNS), size=8, replace=False)]
        topic_adjs = [ADJECTIVES[i] for i in rng.choice(len(ADJECTIVES), size=4, replace=False)]
        topic_verbs = [VERBS[i] for i in rng.choice(len(VERBS), size=4, replace=False)]
        n_sentences = int(rng.integers(4, 9))
        para = " ".join(
            _sentence(rng, topic_nouns, topic_adjs, topic_verbs) for _ in range(n_sentences)
        )
        chunks.append(para)
        total += len(para) + 2
    return "\n\n".join(chunks).encode("ascii")[:n_bytes]


def load_corpus_ids(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    return ByteTokenizer().encode(data)


def split_corpus(ids: np.ndarray, dev_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous split; the tail becomes the dev set."""
    n_dev = max(1, int(len(ids) * dev_fraction))
    return ids[:-n_dev], ids[-n_dev:]
