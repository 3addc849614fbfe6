"""Pluggable token counting. The default needs no model assets."""

from __future__ import annotations

from collections.abc import Callable
from functools import lru_cache

Tokenizer = Callable[[str], int]


def whitespace_tokens(text: str) -> int:
    return len(text.split())


@lru_cache(maxsize=4)
def _hf_tokenizer(name: str) -> Tokenizer:
    from transformers import AutoTokenizer

    tok = AutoTokenizer.from_pretrained(name)
    return lambda text: len(tok.encode(text, add_special_tokens=False))


def get_tokenizer(name: str = "whitespace") -> Tokenizer:
    """``"whitespace"`` or ``"hf:<model-name>"`` (loads a Hugging Face tokenizer)."""
    if name == "whitespace":
        return whitespace_tokens
    if name.startswith("hf:"):
        return _hf_tokenizer(name[3:])
    raise ValueError(f"unknown tokenizer {name!r}; use 'whitespace' or 'hf:<model>'")
