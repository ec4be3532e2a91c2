"""Synthetic seq2seq pair generation and JSONL ingestion.

Four toy tasks stand in for real datasets: COPY and REVERSE are
structure-preserving, SIMPLIFY deterministically drops every
odd-indexed token, PARAPHRASE maps tokens through a fixed random
bijection. The JSONL field names "src"/"trg" match the common public
seq2seq data format so external corpora drop in unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PairRecord",
    "TASKS",
    "gen_task",
    "content_alphabet",
    "load_jsonl",
    "save_jsonl",
    "split",
]

TASKS = ("COPY", "REVERSE", "SIMPLIFY", "PARAPHRASE")


@dataclass(frozen=True)
class PairRecord:
    src: str
    trg: str

    def __post_init__(self):
        if not self.src or not self.trg:
            raise ValueError("src and trg must be non-empty")


def content_alphabet(vocab_size: int) -> list[str]:
    """Deterministic content token names w00, w01, ..."""
    width = max(2, len(str(vocab_size - 1)))
    return [f"w{i:0{width}d}" for i in range(vocab_size)]


def _transform(kind: str, src_tokens: list[str], mapping: dict[str, str]) -> list[str]:
    if kind == "COPY":
        return list(src_tokens)
    if kind == "REVERSE":
        return src_tokens[::-1]
    if kind == "SIMPLIFY":
        return src_tokens[0::2]
    if kind == "PARAPHRASE":
        return [mapping[t] for t in src_tokens]
    raise ValueError(f"unknown task kind {kind!r}; expected one of {TASKS}")


def gen_task(kind: str, n: int, len_range: tuple[int, int], vocab_size: int,
             seed: int) -> list[PairRecord]:
    """Deterministic pair generation for one task.

    vocab_size counts content tokens; lengths are drawn uniformly from
    the inclusive len_range.
    """
    if kind not in TASKS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASKS}")
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"infeasible length range {len_range}")
    if kind == "SIMPLIFY" and lo < 2:
        raise ValueError("SIMPLIFY needs source length >= 2")
    alphabet = content_alphabet(vocab_size)
    rng = np.random.default_rng(seed)
    # Fixed bijection over the alphabet, drawn once from the same seed.
    perm = rng.permutation(vocab_size)
    mapping = {alphabet[i]: alphabet[int(perm[i])] for i in range(vocab_size)}

    records = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        toks = [alphabet[int(i)] for i in rng.integers(0, vocab_size, size=length)]
        records.append(PairRecord(" ".join(toks), " ".join(_transform(kind, toks, mapping))))
    return records


def load_jsonl(path) -> list[PairRecord]:
    """Order-preserving read; blank lines are skipped; malformed lines
    report their 1-based line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            if not isinstance(obj, dict) or "src" not in obj or "trg" not in obj:
                raise ValueError(f"{path}:{lineno}: missing 'src' or 'trg' field")
            records.append(PairRecord(str(obj["src"]), str(obj["trg"])))
    return records


def save_jsonl(path, records: list[PairRecord], extra: list[dict] | None = None) -> None:
    """One compact JSON object per line; `extra` rows merge extra fields."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, rec in enumerate(records):
            obj = {"src": rec.src, "trg": rec.trg}
            if extra is not None:
                obj.update(extra[i])
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def split(records, fractions, seed: int):
    """Deterministic shuffle then contiguous slicing into
    (train, valid, test)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if len(fractions) != 3:
        raise ValueError("expected exactly three fractions")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    n = len(records)
    n_train = round(fractions[0] * n)
    n_valid = round((fractions[0] + fractions[1]) * n) - n_train
    train = shuffled[:n_train]
    valid = shuffled[n_train:n_train + n_valid]
    test = shuffled[n_train + n_valid:]
    return train, valid, test
