"""Closed token vocabulary shared by prompts and programs."""

from __future__ import annotations

import hashlib

PAD, BOS, EOS = "PAD", "BOS", "EOS"

TOKENS: tuple[str, ...] = (
    PAD, BOS, EOS,
    "a", "b", "c", "n", "q",
    *"0123456789",
    "+", "-", "*", "/", "%", "=", ";", "(", ")",
    "return",
    "IN", "OUT", "=>",
)

TOKEN_TO_ID = {tok: i for i, tok in enumerate(TOKENS)}
PAD_ID = TOKEN_TO_ID[PAD]
BOS_ID = TOKEN_TO_ID[BOS]
EOS_ID = TOKEN_TO_ID[EOS]
VOCAB_SIZE = len(TOKENS)

VOCAB_HASH = hashlib.sha256("\n".join(TOKENS).encode("ascii")).hexdigest()[:16]


class EncodingError(ValueError):
    pass


def encode_prompt(text: str) -> list[int]:
    """Word-level lookup, falling back to characters for numbers like ``-12``."""
    ids = []
    for word in text.split():
        if word in TOKEN_TO_ID and word not in (PAD, BOS, EOS):
            ids.append(TOKEN_TO_ID[word])
            continue
        for ch in word:
            if ch not in TOKEN_TO_ID:
                raise EncodingError(f"{ch!r} is not in the vocabulary")
            ids.append(TOKEN_TO_ID[ch])
    return ids


def encode_response(text: str) -> list[int]:
    """Encode whitespace-separated response tokens and append EOS."""
    ids = []
    for word in text.split():
        if word not in TOKEN_TO_ID or word in (PAD, BOS, EOS):
            raise EncodingError(f"{word!r} is not a response token")
        ids.append(TOKEN_TO_ID[word])
    ids.append(EOS_ID)
    return ids


def decode(ids) -> str:
    """Join tokens with single spaces, stopping at the first EOS."""
    words = []
    for i in ids:
        if i == EOS_ID:
            break
        words.append(TOKENS[i])
    return " ".join(words)
