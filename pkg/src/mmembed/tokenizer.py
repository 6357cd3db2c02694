"""Whitespace word-level tokenizer with a fixed vocabulary."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

PAD, UNK, CLS = 0, 1, 2
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]")
# words the pseudo-token prompt relies on
RESERVED_WORDS = ("a", "photo", "of")

_SPLIT = re.compile(r"[^a-z0-9\-]+")


class EmptyInputError(ValueError):
    pass


def normalize(text: str) -> list[str]:
    return [w for w in _SPLIT.split(text.lower()) if w]


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        if len(self.ids) == 0:
            raise EmptyInputError("token sequence must be non-empty")

    def __len__(self):
        return len(self.ids)


class Vocab:
    def __init__(self, words: Iterable[str]):
        self.itos = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "Vocab":
        """Build from an explicit word -> id table (ids above the specials)."""
        size = max(max(mapping.values()) + 1, len(SPECIAL_TOKENS))
        words = [f"[unused{i}]" for i in range(size)]
        for i, tok in enumerate(SPECIAL_TOKENS):
            words[i] = tok
        for word, idx in mapping.items():
            if idx < len(SPECIAL_TOKENS):
                raise ValueError(f"id {idx} is reserved")
            words[idx] = word
        vocab = cls.__new__(cls)
        vocab.itos = words
        vocab.stoi = {w: i for i, w in enumerate(words)}
        return vocab

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int) -> "Vocab":
        """Most frequent words first, ties alphabetical; capped at ``max_size`` ids."""
        counts = Counter()
        for text in texts:
            counts.update(normalize(text))
        budget = max_size - len(SPECIAL_TOKENS)
        words = list(RESERVED_WORDS)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        for word, _ in ranked:
            if len(words) >= budget:
                break
            if word not in words:
                words.append(word)
        return cls(words[:budget])

    def encode(self, text: str, max_len: int) -> TokenSequence:
        return tokenize_text(text, self, max_len)

    def decode(self, ids) -> str:
        return " ".join(self.itos[int(i)] for i in ids)


def tokenize_text(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    words = normalize(text)
    if not words:
        raise EmptyInputError("empty input text")
    ids = [vocab.stoi.get(w, UNK) for w in words]
    truncated = len(ids) > max_len
    return TokenSequence(np.asarray(ids[:max_len], dtype=np.int64), truncated)
