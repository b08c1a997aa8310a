"""Text ingestion: tokenization, vocabulary, gender lexicon, counterfactual augmentation.

All functions here are pure; nothing keeps shared mutable state, so they are
safe to call from concurrent workers.
"""

from __future__ import annotations

import logging
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger("fairlm.corpus")

UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"
RESERVED_TOKENS = (UNK_TOKEN, EOS_TOKEN)

_PUNCT = frozenset(string.punctuation)


class LexiconError(ValueError):
    """Malformed or inconsistent gender-pair file."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach edge punctuation as separate tokens.

    Punctuation characters at the start or end of a whitespace chunk become
    their own tokens ("doctor." -> ["doctor", "."]); interior punctuation is
    kept ("don't" stays one token). Deterministic; empty input gives [].
    """
    out: list[str] = []
    for chunk in text.lower().split():
        lead: list[str] = []
        trail: list[str] = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        out.extend(lead)
        if chunk:
            out.append(chunk)
        out.extend(reversed(trail))
    return out


def detokenize(tokens: list[str]) -> str:
    """Inverse of tokenize for already-tokenized text: space-join."""
    return " ".join(tokens)


class Vocabulary:
    """Bidirectional token<->id map with reserved unknown and end-of-sequence ids.

    Ids 0 and 1 are always ``<unk>`` and ``<eos>``. The stored token list and
    the id map are a bijection; tokens are non-empty and contain no whitespace.
    """

    __slots__ = ("tokens", "ids", "min_count")

    def __init__(self, tokens: list[str], min_count: int = 1):
        tokens = list(tokens)
        if len(tokens) < 2 or tokens[0] != UNK_TOKEN or tokens[1] != EOS_TOKEN:
            raise ValueError("vocabulary must start with the reserved tokens "
                             f"{UNK_TOKEN!r}, {EOS_TOKEN!r}")
        ids: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"invalid token at id {i}: {tok!r}")
            if tok in ids:
                raise ValueError(f"duplicate token {tok!r}")
            ids[tok] = i
        self.tokens = tokens
        self.ids = ids
        self.min_count = min_count

    @property
    def unk_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def id_of(self, token: str) -> int:
        """Id of a token, falling back to unk_id for unknown tokens."""
        return self.ids.get(token, 0)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.ids.get(t, 0) for t in tokens], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        """Write one token per line; the line number is the id."""
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, min_count: int = 1) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln], min_count=min_count)


def build_vocab(tokens: list[str], min_count: int = 1,
                max_size: int | None = None) -> Vocabulary:
    """Build a Vocabulary from a token list.

    Tokens with frequency >= min_count get ids in order of descending
    frequency, ties broken lexicographically, after the two reserved tokens.
    An optional max_size caps the total vocabulary (reserved included).
    Rarer tokens resolve to unk at encode time.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t for t in tokens if t not in RESERVED_TOKENS)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max(0, max_size - len(RESERVED_TOKENS))]
    return Vocabulary(list(RESERVED_TOKENS) + kept, min_count=min_count)


@dataclass(frozen=True)
class TokenStream:
    """A sequence of token ids plus a provenance label."""

    ids: np.ndarray
    source: str = "raw"  # raw | augmented | generated

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass(frozen=True)
class GenderLexicon:
    """Gender pairs, the swap map they induce, and the neutral complement.

    ``pairs`` holds (female_id, male_id) tuples; its length is the pair-set
    size used to normalize the equalizing loss. ``swap`` maps every gendered
    id to its counterpart and is an involution. Swap-only entries (from the
    optional second file section) are swapped and excluded from ``neutral``
    but carry no gender label of their own and do not count toward the pair
    set.
    """

    pairs: tuple[tuple[int, int], ...]
    swap: dict[int, int]
    female_ids: frozenset[int]
    male_ids: frozenset[int]
    neutral: frozenset[int]
    dropped: tuple[tuple[str, str], ...] = ()

    @property
    def size(self) -> int:
        return len(self.pairs)

    def gender_of(self, token_id: int) -> str | None:
        if token_id in self.female_ids:
            return "f"
        if token_id in self.male_ids:
            return "m"
        return None


def _parse_pair_file(path: str | Path) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    pairs: list[tuple[str, str]] = []
    extras: list[tuple[str, str]] = []
    section = pairs
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[swap-only]":
            section = extras
            continue
        fields = [f.strip().lower() for f in line.split("\t")]
        if len(fields) != 2 or not all(fields) or any(" " in f for f in fields):
            raise LexiconError(f"{path}: malformed line {lineno}: {raw!r} "
                               "(expected two tab-separated single tokens)")
        section.append((fields[0], fields[1]))
    return pairs, extras


def load_gender_pairs(path: str | Path, vocab: Vocabulary) -> GenderLexicon:
    """Load a gender-pair file and restrict it to the vocabulary.

    The file holds ``female<TAB>male`` lines; ``#`` starts a comment and a
    ``[swap-only]`` line opens an optional section of ``from<TAB>to`` entries
    for asymmetric surface forms. A token may appear in at most one pair and
    never on both sides; the final swap map must be an involution. Pairs with
    a side missing from the vocabulary are dropped with a warning.
    """
    pair_words, extra_words = _parse_pair_file(path)

    seen: set[str] = set()
    for f, m in pair_words:
        if f == m:
            raise LexiconError(f"{path}: token {f!r} appears on both sides of a pair")
        for tok in (f, m):
            if tok in seen:
                raise LexiconError(f"{path}: duplicate token {tok!r} across pairs")
            seen.add(tok)

    swap_words: dict[str, str] = {}
    for f, m in pair_words:
        swap_words[f] = m
        swap_words[m] = f
    for a, b in extra_words:
        if a in swap_words:
            raise LexiconError(f"{path}: swap-only source {a!r} already mapped")
        if a == b:
            raise LexiconError(f"{path}: swap-only entry maps {a!r} to itself")
        swap_words[a] = b
    for a, b in extra_words:
        existing = swap_words.get(b)
        if existing is None:
            swap_words[b] = a
        elif existing != a:
            raise LexiconError(f"{path}: swap map is not an involution: "
                               f"{a!r}->{b!r} but {b!r}->{existing!r}")

    in_vocab = lambda t: t in vocab  # noqa: E731
    kept_pairs: list[tuple[int, int]] = []
    dropped: list[tuple[str, str]] = []
    for f, m in pair_words:
        if in_vocab(f) and in_vocab(m):
            kept_pairs.append((vocab.ids[f], vocab.ids[m]))
        else:
            dropped.append((f, m))
    if dropped:
        log.warning("%d gender pair(s) dropped (token not in vocabulary): %s",
                    len(dropped), ", ".join(f"{f}/{m}" for f, m in dropped))

    swap_ids: dict[int, int] = {}
    for a, b in swap_words.items():
        if in_vocab(a) and in_vocab(b):
            swap_ids[vocab.ids[a]] = vocab.ids[b]
    # dropping out-of-vocab endpoints can only remove entries pairwise,
    # so the involution survives; assert it anyway
    for k, v in swap_ids.items():
        if swap_ids.get(v) != k:
            raise LexiconError(f"{path}: swap map lost involution after vocab restriction")

    female = frozenset(f for f, _ in kept_pairs)
    male = frozenset(m for _, m in kept_pairs)
    gendered = set(swap_ids)
    neutral = frozenset(range(len(vocab))) - gendered - {vocab.unk_id, vocab.eos_id}
    return GenderLexicon(pairs=tuple(kept_pairs), swap=swap_ids,
                         female_ids=female, male_ids=male,
                         neutral=neutral, dropped=tuple(dropped))


def lexicon_from_pairs(word_pairs: list[tuple[str, str]], vocab: Vocabulary,
                       extra: list[tuple[str, str]] | None = None) -> GenderLexicon:
    """Build a GenderLexicon directly from (female, male) word lists."""
    kept: list[tuple[int, int]] = []
    dropped: list[tuple[str, str]] = []
    swap: dict[int, int] = {}
    for f, m in word_pairs:
        if f in vocab and m in vocab:
            fid, mid = vocab.ids[f], vocab.ids[m]
            kept.append((fid, mid))
            swap[fid] = mid
            swap[mid] = fid
        else:
            dropped.append((f, m))
    for a, b in (extra or []):
        if a in vocab and b in vocab:
            swap[vocab.ids[a]] = vocab.ids[b]
            swap.setdefault(vocab.ids[b], vocab.ids[a])
    female = frozenset(f for f, _ in kept)
    male = frozenset(m for _, m in kept)
    neutral = frozenset(range(len(vocab))) - set(swap) - {vocab.unk_id, vocab.eos_id}
    return GenderLexicon(pairs=tuple(kept), swap=swap, female_ids=female,
                         male_ids=male, neutral=neutral, dropped=tuple(dropped))


def cda_augment(stream: TokenStream, lexicon: GenderLexicon) -> TokenStream:
    """Counterfactual augmentation: append a gender-swapped copy of the stream.

    Every id in the swap map's domain is replaced by its counterpart in the
    copy; everything else passes through unchanged. The output is exactly
    twice as long and labeled ``augmented``. Augmenting an already augmented
    stream is allowed (it doubles again and stays pair-balanced).
    """
    ids = stream.ids
    if len(ids) == 0:
        return TokenStream(ids=ids.copy(), source="augmented")
    top = int(ids.max(initial=0))
    if lexicon.swap:
        top = max(top, max(lexicon.swap), max(lexicon.swap.values()))
    table = np.arange(top + 1, dtype=np.int64)
    for k, v in lexicon.swap.items():
        table[k] = v
    return TokenStream(ids=np.concatenate([ids, table[ids]]), source="augmented")


def read_token_lines(path: str | Path) -> list[list[str]]:
    """Tokenize a raw UTF-8 text file, one token-list per non-empty line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [toks for toks in (tokenize(ln) for ln in lines) if toks]


def read_pretokenized_lines(path: str | Path) -> list[list[str]]:
    """Read an already-tokenized file (space-joined tokens per line)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.split() for ln in lines if ln.split()]


def encode_lines(lines: list[list[str]], vocab: Vocabulary,
                 source: str = "raw", add_eos: bool = True) -> TokenStream:
    """Flatten token lines into one id stream, eos-terminating each line."""
    ids: list[int] = []
    for toks in lines:
        ids.extend(vocab.ids.get(t, 0) for t in toks)
        if add_eos:
            ids.append(vocab.eos_id)
    return TokenStream(ids=np.array(ids, dtype=np.int64), source=source)


def encode_documents(lines: list[list[str]], vocab: Vocabulary,
                     source: str = "raw") -> list[TokenStream]:
    """Encode each line as its own document stream (no eos added)."""
    return [TokenStream(ids=vocab.encode(toks), source=source) for toks in lines]


def stream_to_lines(stream: TokenStream, vocab: Vocabulary) -> list[str]:
    """Split a stream at eos tokens and render each piece as text."""
    out: list[str] = []
    current: list[str] = []
    for tid in stream.ids:
        if tid == vocab.eos_id:
            if current:
                out.append(detokenize(current))
            current = []
        else:
            current.append(vocab.token_of(int(tid)))
    if current:
        out.append(detokenize(current))
    return out
