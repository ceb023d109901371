"""Uncased WordPiece tokenization.

Vocabularies are either learned from a corpus by iterative pair-frequency
merging or loaded from a standard one-token-per-line vocab file.
"""

from __future__ import annotations

import hashlib
import heapq
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
MAX_WORD_CHARS = 100


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pre_tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and make each punctuation mark its own token."""
    out: list[str] = []
    for chunk in text.lower().split():
        word = []
        for ch in chunk:
            if _is_punctuation(ch):
                if word:
                    out.append("".join(word))
                    word = []
                out.append(ch)
            else:
                word.append(ch)
        if word:
            out.append("".join(word))
    return out


class Vocabulary:
    """Token <-> id map with the five special tokens, [PAD] pinned at id 0."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        missing = [t for t in SPECIAL_TOKENS if t not in tokens]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        if tokens[0] != PAD:
            raise ValueError("[PAD] must have id 0")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.cls_id = self.index[CLS]
        self.sep_id = self.index[SEP]
        self.mask_id = self.index[MASK]
        self.special_ids = frozenset(self.index[t] for t in SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        """Read a vocab file: one token per line, id = zero-based line number."""
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def _word_symbols(word: str) -> tuple[str, ...]:
    return (word[0],) + tuple("##" + c for c in word[1:])


def _merge_symbol(a: str, b: str) -> str:
    return a + b[2:]


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Learn a WordPiece vocabulary of at most ``target_size`` tokens.

    Starts from the special tokens plus every character observed (word-initial
    form ``c`` and continuation form ``##c``), then repeatedly merges the most
    frequent adjacent symbol pair across the corpus' words. Equal counts go
    to the lexicographically smallest pair. Merged symbols already in the
    vocabulary still count as a merge step but add no token.
    """
    words = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        words.update(w for w in pre_tokenize(text) if len(w) <= MAX_WORD_CHARS)
    if n_docs == 0:
        raise ValueError("empty corpus")

    alphabet = sorted({s for w in words for s in _word_symbols(w)})
    tokens = list(SPECIAL_TOKENS) + alphabet
    if target_size < len(tokens):
        raise ValueError(
            f"target_size={target_size} below specials + alphabet ({len(tokens)})")
    known = set(tokens)

    seqs = [list(_word_symbols(w)) for w in words]
    freq = list(words.values())
    pair_count: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            pair_count[pair] += freq[wi]
            where[pair].add(wi)
    heap = [(-c, p) for p, c in pair_count.items()]
    heapq.heapify(heap)

    while len(tokens) < target_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_count.get(pair, 0) != -neg or -neg <= 0:
            continue  # stale entry
        a, b = pair
        merged = _merge_symbol(a, b)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        touched = defaultdict(int)
        for wi in where.pop(pair, ()):
            seq, f = seqs[wi], freq[wi]
            for p in zip(seq, seq[1:]):
                touched[p] -= f
            i, new = 0, []
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    new.append(merged)
                    i += 2
                else:
                    new.append(seq[i])
                    i += 1
            seqs[wi] = new
            for p in zip(new, new[1:]):
                touched[p] += f
                where[p].add(wi)
        pair_count.pop(pair, None)
        for p, delta in touched.items():
            if p == pair or delta == 0:
                continue
            pair_count[p] += delta
            if pair_count[p] > 0:
                heapq.heappush(heap, (-pair_count[p], p))
            else:
                pair_count.pop(p)
    return Vocabulary(tokens)


def wordpiece(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first split of one pre-token; [UNK] if impossible."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            sub = word[start:end] if start == 0 else "##" + word[start:end]
            if sub in vocab.index:
                piece = sub
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocabulary) -> list[str]:
    return [p for w in pre_tokenize(text) for p in wordpiece(w, vocab)]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    segment_ids: tuple[int, ...]
    label: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return sum(self.attention_mask)


def encode(text: str, vocab: Vocabulary, max_len: int, label: int = 0) -> TokenSequence:
    """[CLS] body [SEP] [PAD]... with the body truncated to ``max_len - 2`` pieces."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    body = [vocab.index[p] for p in tokenize(text, vocab)][: max_len - 2]
    ids = [vocab.cls_id, *body, vocab.sep_id]
    n = len(ids)
    pad = max_len - n
    return TokenSequence(
        tuple(ids + [vocab.pad_id] * pad),
        tuple([1] * n + [0] * pad),
        (0,) * max_len,
        int(label),
    )


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Join pieces back into space-separated pre-tokens (specials dropped)."""
    words: list[str] = []
    for i in ids:
        tok = vocab.tokens[i]
        if tok in SPECIAL_TOKENS:
            continue
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)


def encode_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int, labels=None):
    labels = labels if labels is not None else [0] * len(texts)
    return [encode(t, vocab, max_len, y) for t, y in zip(texts, labels)]


def batch_arrays(batch: Sequence[TokenSequence]):
    """Stack a batch into (ids, attention_mask, segment_ids) int arrays."""
    lengths = {len(s) for s in batch}
    if len(lengths) != 1:
        raise ValueError(f"non-uniform sequence lengths in batch: {sorted(lengths)}")
    ids = np.array([s.ids for s in batch], dtype=np.int64)
    mask = np.array([s.attention_mask for s in batch], dtype=np.int64)
    seg = np.array([s.segment_ids for s in batch], dtype=np.int64)
    return ids, mask, seg


def mlm_mask(seq: TokenSequence, vocab: Vocabulary, mask_rate: float = 0.15, seed: int = 0):
    """Corrupt a sequence for masked-token prediction.

    Each real, non-special position is chosen with probability ``mask_rate``.
    A chosen token becomes [MASK] 80% of the time, a random non-special
    token 10% of the time, and is left unchanged otherwise. Returns the
    corrupted id tuple and a ``{position: original_id}`` target map.
    """
    rng = np.random.default_rng(seed)
    ids = list(seq.ids)
    candidates = [p for p, (t, m) in enumerate(zip(ids, seq.attention_mask))
                  if m and t not in vocab.special_ids]
    draws = rng.random(len(candidates))
    actions = rng.random(len(candidates))
    normal_ids = [i for i in range(len(vocab)) if i not in vocab.special_ids]
    replacements = rng.integers(0, len(normal_ids), size=len(candidates))
    targets: dict[int, int] = {}
    for pos, u, a, r in zip(candidates, draws, actions, replacements):
        if u >= mask_rate:
            continue
        targets[pos] = ids[pos]
        if a < 0.8:
            ids[pos] = vocab.mask_id
        elif a < 0.9:
            ids[pos] = normal_ids[r]
    return tuple(ids), targets
