"""Deterministic sparse feature hashing.

Texts are reduced to hashed bags of lowercased word unigrams and bigrams;
token sequences get one hashed vector per token built from the token surface,
its lowercase form, and its immediate neighbors. Hashing uses FNV-1a 64-bit
reduced modulo the (power-of-two) feature dimension, so vectors are stable
across runs, processes, and platforms.
"""

from __future__ import annotations

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK_64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_DIM = 2**18

SparseVector = dict[int, float]


def fnv1a_64(text: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 encoding of ``text``."""
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & MASK_64
    return h


def _check_dim(dim: int) -> None:
    if dim < 2 or dim & (dim - 1) != 0:
        raise ValueError(f"feature dimension must be a power of two >= 2, got {dim}")


def _bump(vec: SparseVector, key: str, dim: int) -> None:
    idx = fnv1a_64(key) % dim
    vec[idx] = vec.get(idx, 0.0) + 1.0


def hash_text(text: str, dim: int = DEFAULT_DIM) -> SparseVector:
    """Hashed unigram+bigram counts of a whitespace-tokenized, lowercased text."""
    _check_dim(dim)
    words = text.lower().split()
    if not words:
        raise ValueError("cannot featurize empty text")
    vec: SparseVector = {}
    for word in words:
        _bump(vec, "uni:" + word, dim)
    for left, right in zip(words, words[1:]):
        _bump(vec, "bi:" + left + " " + right, dim)
    return vec


def hash_tokens(tokens: list[str] | tuple[str, ...], dim: int = DEFAULT_DIM) -> list[SparseVector]:
    """Per-token hashed features: surface form, lowercase form, and +-1 neighbors.

    Neighbor features use lowercase forms, with sentinels at the sequence
    boundaries so the first and last tokens are distinguishable.
    """
    _check_dim(dim)
    if len(tokens) == 0:
        raise ValueError("cannot featurize an empty token sequence")
    if any(not tok for tok in tokens):
        raise ValueError("tokens must be nonempty strings")
    lower = [tok.lower() for tok in tokens]
    out: list[SparseVector] = []
    for i, tok in enumerate(tokens):
        vec: SparseVector = {}
        _bump(vec, "tok:" + tok, dim)
        _bump(vec, "low:" + lower[i], dim)
        _bump(vec, "prev:" + (lower[i - 1] if i > 0 else "<s>"), dim)
        _bump(vec, "next:" + (lower[i + 1] if i + 1 < len(tokens) else "</s>"), dim)
        out.append(vec)
    return out


def featurize_text(raw_text: str | list[str] | tuple[str, ...], dim: int = DEFAULT_DIM):
    """Featurize a raw text (one vector) or a token sequence (one vector per token)."""
    if isinstance(raw_text, str):
        return hash_text(raw_text, dim)
    return hash_tokens(raw_text, dim)
