"""Skeleton <-> token codec.

Each joint becomes six tokens: the quantized position of its parent followed
by its own quantized position. The root is its own parent, so the first
three tokens of every sequence are the root position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import K_MAX, ROOT, Skeleton, require_valid, traversal_order

TOKENS_PER_JOINT = 6


class TokenFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    bins: int = 256

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 bins")

    @property
    def bos(self) -> int:
        return self.bins

    @property
    def eos(self) -> int:
        return self.bins + 1

    @property
    def pad(self) -> int:
        return self.bins + 2

    @property
    def size(self) -> int:
        return self.bins + 3

    @property
    def max_payload(self) -> int:
        return TOKENS_PER_JOINT * K_MAX


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int64).reshape(-1)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)

    def payload(self, vocab: Vocab) -> np.ndarray:
        return payload_of(self.ids, vocab)


def quantize_coord(x, bins: int = 256):
    """Map coordinates in [-1, 1] to bin ids, rounding halves up."""
    a = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(a)) or np.any(a < -1.0) or np.any(a > 1.0):
        raise ValueError("coordinate outside [-1, 1]")
    q = np.floor((a + 1.0) / 2.0 * (bins - 1) + 0.5).astype(np.int64)
    q = np.clip(q, 0, bins - 1)
    return int(q) if q.ndim == 0 else q


def dequantize_coord(q, bins: int = 256):
    a = np.asarray(q)
    if np.any(a < 0) or np.any(a > bins - 1):
        raise ValueError(f"bin id outside [0, {bins - 1}]")
    x = 2.0 * a.astype(np.float64) / (bins - 1) - 1.0
    return float(x) if x.ndim == 0 else x


def tokenize_skeleton(skel: Skeleton, vocab: Vocab = Vocab()) -> TokenSequence:
    require_valid(skel)
    order = traversal_order(skel)
    q = quantize_coord(skel.joints, vocab.bins)
    out = np.empty((skel.k, TOKENS_PER_JOINT), dtype=np.int64)
    for i, j in enumerate(order):
        p = skel.parents[j]
        out[i, :3] = q[j] if p == ROOT else q[p]
        out[i, 3:] = q[j]
    return TokenSequence(out.reshape(-1))


def payload_of(ids, vocab: Vocab) -> np.ndarray:
    """Strip one leading BOS, everything from the first EOS, and trailing PADs.

    Any special token left in the middle is a format error.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if len(ids) and ids[0] == vocab.bos:
        ids = ids[1:]
    eos = np.flatnonzero(ids == vocab.eos)
    if len(eos):
        ids = ids[: eos[0]]
    end = len(ids)
    while end > 0 and ids[end - 1] == vocab.pad:
        end -= 1
    ids = ids[:end]
    if np.any((ids < 0) | (ids >= vocab.bins)):
        raise TokenFormatError("special or out-of-range token inside payload")
    return ids


def detokenize(tokens, vocab: Vocab = Vocab()) -> Skeleton:
    """Rebuild a skeleton, resolving each parent triple to the nearest joint
    decoded before it (lowest index on ties)."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    payload = payload_of(ids, vocab)
    n = len(payload)
    if n == 0:
        raise TokenFormatError("empty payload")
    if n % TOKENS_PER_JOINT:
        raise TokenFormatError(f"payload length {n} is not a multiple of {TOKENS_PER_JOINT}")
    if n > vocab.max_payload:
        raise TokenFormatError(f"payload length {n} exceeds {vocab.max_payload}")
    k = n // TOKENS_PER_JOINT
    if k < 2:
        raise TokenFormatError("payload encodes fewer than two joints")
    unions = dequantize_coord(payload.reshape(k, 2, 3), vocab.bins)
    parent_pos, joints = unions[:, 0], unions[:, 1]
    parents = np.full(k, ROOT, dtype=np.int64)
    for i in range(1, k):
        d = np.sum((joints[:i] - parent_pos[i]) ** 2, axis=1)
        parents[i] = int(np.argmin(d))
    return Skeleton(joints, parents)


def to_text(ids) -> str:
    return " ".join(str(int(t)) for t in np.asarray(ids).reshape(-1)) + "\n"


def from_text(text: str) -> np.ndarray:
    try:
        return np.array([int(t) for t in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise TokenFormatError(f"non-integer token: {exc}") from None


def to_bytes(ids) -> bytes:
    a = np.asarray(ids, dtype=np.int64).reshape(-1)
    if np.any((a < 0) | (a > 0xFFFF)):
        raise TokenFormatError("token id does not fit in 16 bits")
    return a.astype("<u2").tobytes()


def from_bytes(data: bytes) -> np.ndarray:
    if len(data) % 2:
        raise TokenFormatError("binary token stream has odd byte length")
    return np.frombuffer(data, dtype="<u2").astype(np.int64)
