"""Phrase normalization and tokenization used by the lexicon and extractors."""
from __future__ import annotations

import re

_WHITESPACE_RE = re.compile(r"\s+")
_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Only terminal punctuation is stripped; interior punctuation is left for the
# tokenizer, which drops it anyway.
_TERMINAL_PUNCT = ".,;:!?"


def normalize_phrase(raw: str) -> str:
    """Lowercase, collapse whitespace, strip ends and terminal punctuation.

    Idempotent: normalize_phrase(normalize_phrase(x)) == normalize_phrase(x).
    """
    phrase = _WHITESPACE_RE.sub(" ", raw.lower()).strip()
    phrase = phrase.rstrip(_TERMINAL_PUNCT).strip()
    return phrase


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase alphanumeric tokens of ``text``, in order."""
    return tuple(_TOKEN_RE.findall(text.lower()))
