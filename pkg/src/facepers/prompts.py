"""Tiny fixed vocabulary standing in for a text encoder.

Prompt strings are split on whitespace and commas; every known word maps to
a fixed id. ``*`` is the learnable identity token and every prompt ends with
exactly one end-of-text token.
"""
from __future__ import annotations

import re

import torch

from .errors import InvalidPromptError

POSITIVE_PROMPT = "a Photo of * , masterpiece, best quality, realistic, very clear, professional"
NEGATIVE_PROMPT = "3d, cartoon, anime, sketches, worst quality, low quality"

VOCAB = (
    "<unk>", "<eot>", "*", ",", "a", "photo", "of", "face", "person",
    "masterpiece", "best", "quality", "realistic", "very", "clear",
    "professional", "3d", "cartoon", "anime", "sketches", "worst", "low",
    "high", "portrait", "sharp", "blurry", "noisy", "old", "red", "hair",
    "the", "and",
)
TOKEN_IDS = {word: i for i, word in enumerate(VOCAB)}
UNK = TOKEN_IDS["<unk>"]
EOT = TOKEN_IDS["<eot>"]
STAR = TOKEN_IDS["*"]
INIT_WORD = "face"

_SPLIT = re.compile(r"\s*(,)\s*|\s+")


def tokenize(text: str) -> torch.Tensor:
    """Prompt string -> 1-D LongTensor ending in EOT."""
    words = [w for w in _SPLIT.split(text.strip().lower()) if w]
    ids = [TOKEN_IDS.get(w, UNK) for w in words]
    if ids.count(STAR) > 1:
        raise InvalidPromptError("a prompt may contain at most one '*' token")
    return torch.tensor(ids + [EOT], dtype=torch.long)


def validate(tokens: torch.Tensor, require_star: bool = False) -> None:
    ids = tokens.tolist()
    if not ids or ids[-1] != EOT or ids.count(EOT) != 1:
        raise InvalidPromptError("prompt must contain exactly one EOT token, at the end")
    if ids.count(STAR) > 1:
        raise InvalidPromptError("prompt contains more than one '*' token")
    if require_star and STAR not in ids:
        raise InvalidPromptError("prompt has no '*' token")


def star_index(tokens: torch.Tensor) -> int | None:
    hits = (tokens == STAR).nonzero()
    return int(hits[0]) if len(hits) else None


def eot_index(tokens: torch.Tensor) -> int:
    return int(tokens.numel() - 1)
