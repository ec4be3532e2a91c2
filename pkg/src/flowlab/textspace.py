"""Token <-> embedding mapping with a tied decoding head.

The decoder head is the embedding table transposed: logits(z) = z @ E^T.
Rounding a latent back to a token takes the argmax of those tied logits,
with ties broken toward the smallest id. The cross-entropy anchor loss
keeps the embedding rows decodable (it is computed on the ground-truth
target embedding, so it trains the table, not the denoiser).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc

__all__ = [
    "PAD_ID",
    "SEP_ID",
    "EOS_ID",
    "UNK_ID",
    "SPECIALS",
    "Vocab",
    "EmbeddingTable",
    "embed",
    "round_tokens",
    "ce_anchor_loss",
    "encode_pair",
    "pack_batch",
]

PAD_ID, SEP_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = ["<pad>", "<sep>", "<eos>", "<unk>"]


@dataclass
class Vocab:
    """Dense token <-> id mapping with reserved specials at ids 0..3."""

    tokens: list[str]
    _ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ValueError(f"vocab must start with specials {SPECIALS}")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_content_tokens(cls, content: list[str]) -> "Vocab":
        """Build from content tokens (deduplicated, sorted for determinism)."""
        uniq = sorted(set(content) - set(SPECIALS))
        return cls(SPECIALS + uniq)

    @classmethod
    def from_corpus(cls, texts: list[str]) -> "Vocab":
        toks: list[str] = []
        for t in texts:
            toks.extend(t.split())
        return cls.from_content_tokens(toks)

    def encode(self, text: str) -> list[int]:
        """Whitespace tokenization; out-of-vocab tokens map to UNK."""
        return [self._ids.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids) -> str:
        """Content text: stop at EOS, drop PAD/SEP."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, SEP_ID):
                continue
            out.append(self.tokens[i])
        return " ".join(out)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


class EmbeddingTable:
    """Trainable V x d matrix; the decode head is tied (logits = z @ E^T)."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.dim = dim
        self.weight = nc.Tensor(
            rng.standard_normal((vocab_size, dim)).astype(np.float32),
            requires_grad=True,
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EmbeddingTable":
        t = cls.__new__(cls)
        t.vocab_size, t.dim = arr.shape
        t.weight = nc.Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)
        return t

    @property
    def array(self) -> np.ndarray:
        return self.weight.data


def embed(tokens, table: EmbeddingTable) -> nc.Tensor:
    """Row i of the result is E[tokens[i]]; accepts any integer id array."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise ValueError(
            f"token id out of range: table has {table.vocab_size} rows"
        )
    return nc.embed_rows(table.weight, ids)


def round_tokens(z, table: EmbeddingTable) -> np.ndarray:
    """Argmax over the tied-head scores z @ E^T per position.

    np.argmax returns the first maximum, which is the smallest id, giving
    the deterministic tie-break.
    """
    arr = z.data if isinstance(z, nc.Tensor) else np.asarray(z)
    if arr.shape[-1] != table.dim:
        raise ValueError(f"latent width {arr.shape[-1]} != embedding dim {table.dim}")
    scores = arr @ table.array.T
    return np.argmax(scores, axis=-1)


def ce_anchor_loss(z0_target, tokens, table: EmbeddingTable) -> nc.Tensor:
    """Mean cross entropy between softmax(z0_target @ E^T) and tokens.

    Differentiable with respect to both the latents and the table.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    z = z0_target if isinstance(z0_target, nc.Tensor) else nc.Tensor(z0_target)
    if z.shape[:-1] != ids.shape:
        raise ValueError(
            f"length mismatch: latents {tuple(z.shape[:-1])} vs tokens {ids.shape}"
        )
    logits = nc.matmul(z, nc.swap_axes(table.weight, 0, 1))
    return nc.cross_entropy_logits(logits, ids)


def encode_pair(vocab: Vocab, src_text: str, trg_text: str,
                src_len: int, tgt_len: int) -> tuple[list[int], list[int]]:
    """Fixed-length id sequences: src + SEP right-padded to src_len, and
    trg + EOS right-padded to tgt_len."""
    src = vocab.encode(src_text) + [SEP_ID]
    trg = vocab.encode(trg_text) + [EOS_ID]
    if len(src) > src_len:
        raise ValueError(f"source needs {len(src)} slots, src_len={src_len}")
    if len(trg) > tgt_len:
        raise ValueError(f"target needs {len(trg)} slots, tgt_len={tgt_len}")
    src = src + [PAD_ID] * (src_len - len(src))
    trg = trg + [PAD_ID] * (tgt_len - len(trg))
    return src, trg


def pack_batch(vocab: Vocab, pairs, src_len: int, tgt_len: int):
    """Batch of (src, trg) texts -> (B, src_len) and (B, tgt_len) id arrays."""
    srcs, trgs = [], []
    for rec in pairs:
        s, t = encode_pair(vocab, rec.src, rec.trg, src_len, tgt_len)
        srcs.append(s)
        trgs.append(t)
    return np.asarray(srcs, dtype=np.int64), np.asarray(trgs, dtype=np.int64)
