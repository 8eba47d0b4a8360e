"""Word-level tokenization shared by the filter, the scorer, and the prompt encoder."""

from __future__ import annotations

import re

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")


def word_tokenize(text: str) -> list[str]:
    """Lowercase and split into alphanumeric tokens, dropping punctuation."""
    return _WORD_RE.findall(text.lower())


def build_vocab(texts, reserved: tuple[str, ...] = ()) -> list[str]:
    """Deterministic vocabulary: reserved tokens first, then sorted corpus words."""
    seen = set(reserved)
    words = set()
    for text in texts:
        for tok in word_tokenize(text):
            if tok not in seen:
                words.add(tok)
    return list(reserved) + sorted(words)
