"""Ancestral sampling of documents from a trained model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as lm
from .corpus import TokenStream, Vocabulary


@dataclass(frozen=True)
class GenerationConfig:
    num_docs: int
    doc_len: int
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_docs < 1 or self.doc_len < 1:
            raise ValueError("num_docs and doc_len must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    # inverse-CDF draw; side="right" skips zero-width (zero-probability) slots
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, probs.size - 1)


def generate(params: lm.ModelParams, vocab: Vocabulary,
             config: GenerationConfig) -> list[TokenStream]:
    """Sample documents independently, each from a zero state seeded with eos.

    Tokens are drawn from the temperature-scaled softmax with the unknown
    token masked out. Each document uses its own generator seeded with
    ``config.seed + doc_index``, so serial and parallel runs agree.
    """
    docs: list[TokenStream] = []
    for doc_index in range(config.num_docs):
        rng = np.random.Generator(np.random.PCG64(config.seed + doc_index))
        state = lm.HiddenState.zeros(params.num_layers, params.hidden_units, 1)
        prev = vocab.eos_id
        ids = np.empty(config.doc_len, dtype=np.int64)
        for t in range(config.doc_len):
            logits, state = lm.forward_batch(
                params, np.array([[prev]], dtype=np.int64), state)
            probs = lm.softmax(logits[0, 0] / config.temperature)
            probs[vocab.unk_id] = 0.0
            probs /= probs.sum()
            prev = _sample(probs, rng)
            ids[t] = prev
        docs.append(TokenStream(ids=ids, source="generated"))
    return docs


def write_documents(docs: list[TokenStream], vocab: Vocabulary, path) -> None:
    """One document per line, space-joined tokens, UTF-8."""
    lines = [" ".join(vocab.token_of(int(t)) for t in doc.ids) for doc in docs]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
