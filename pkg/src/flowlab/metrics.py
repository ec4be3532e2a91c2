"""Text-quality metrics and minimum-Bayes-risk candidate selection.

Sentence-level metrics over token sequences: smoothed BLEU-4 (add-one on
zero counts for orders >= 2, brevity penalty when the hypothesis is
shorter), ROUGE-L as plain LCS F1, and dist-1 as the per-sentence unique
unigram ratio. MBR picks the candidate maximizing summed BLEU against the
other candidates; the sweep evaluates a fixed candidate pool at every
pool size so results at n are deterministic functions of the pool.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

__all__ = [
    "MetricReport",
    "bleu",
    "rouge_l",
    "dist1",
    "mbr_select",
    "mbr_select_index",
    "sweep_from_pool",
    "mbr_sweep",
    "reports_to_csv",
]


@dataclass(frozen=True)
class MetricReport:
    bleu: float
    rouge_l: float
    dist1: float
    n_samples: int
    mbr_n: int

    def __post_init__(self):
        for name in ("bleu", "rouge_l", "dist1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def _ngrams(seq, n: int):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def bleu(hyp, ref) -> float:
    """Smoothed sentence BLEU-4.

    Modified n-gram precisions for n = 1..4 with add-one smoothing on zero
    counts for n >= 2, geometric mean, brevity penalty
    exp(1 - |ref|/|hyp|) when the hypothesis is shorter.
    """
    hyp, ref = list(hyp), list(ref)
    if not hyp or not ref:
        raise ValueError("bleu: empty input")
    prod = 1.0
    for n in range(1, 5):
        counts = Counter(_ngrams(hyp, n))
        ref_counts = Counter(_ngrams(ref, n))
        num = sum(min(c, ref_counts[g]) for g, c in counts.items())
        den = sum(counts.values())
        if n >= 2 and num == 0:
            num, den = num + 1, den + 1
        prod *= num / den if den else 0.0
    bp = math.exp(1.0 - len(ref) / len(hyp)) if len(hyp) < len(ref) else 1.0
    return bp * prod ** 0.25


def _lcs_len(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, ref) -> float:
    """LCS F1: P = LCS/|hyp|, R = LCS/|ref|, F = 2PR/(P+R); 0 when LCS=0."""
    hyp, ref = list(hyp), list(ref)
    if not hyp or not ref:
        raise ValueError("rouge_l: empty input")
    lcs = _lcs_len(hyp, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def dist1(hyps) -> float:
    """Mean over sequences of unique-unigram count / total unigrams."""
    hyps = list(hyps)
    if not hyps:
        raise ValueError("dist1: empty list")
    ratios = []
    for h in hyps:
        h = list(h)
        if not h:
            raise ValueError("dist1: empty sequence")
        ratios.append(len(set(h)) / len(h))
    return sum(ratios) / len(ratios)


def mbr_select_index(candidates) -> int:
    """Index of the candidate maximizing sum of bleu(c, c') over the other
    candidates; ties break toward the lowest index. Empty candidates carry
    zero utility (they can never match anything)."""
    candidates = [list(c) for c in candidates]
    if not candidates:
        raise ValueError("mbr_select: empty candidate set")
    if len(candidates) == 1:
        return 0

    def pair(c, other):
        return bleu(c, other) if c and other else 0.0

    best_i, best_u = 0, -math.inf
    for i, c in enumerate(candidates):
        u = sum(pair(c, other) for j, other in enumerate(candidates) if j != i)
        if u > best_u:
            best_i, best_u = i, u
    return best_i


def mbr_select(candidates):
    candidates = [list(c) for c in candidates]
    return candidates[mbr_select_index(candidates)]


def _safe_pair(hyp, ref, fn) -> float:
    if not hyp:
        return 0.0
    return fn(hyp, ref)


def sweep_from_pool(pools, refs, n_max: int) -> list[MetricReport]:
    """Per-n metrics of MBR selection over the first n candidates of a
    fixed pool. pools[i] is the ordered candidate list for item i."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if len(pools) != len(refs):
        raise ValueError("pools and refs must align")
    if any(len(p) < n_max for p in pools):
        raise ValueError("every pool must hold at least n_max candidates")
    reports = []
    for n in range(1, n_max + 1):
        selected = [mbr_select(pool[:n]) for pool in pools]
        b = sum(_safe_pair(s, r, bleu) for s, r in zip(selected, refs)) / len(refs)
        rl = sum(_safe_pair(s, r, rouge_l) for s, r in zip(selected, refs)) / len(refs)
        nonempty = [s for s in selected if s]
        d = dist1(nonempty) if nonempty else 0.0
        reports.append(MetricReport(bleu=b, rouge_l=rl, dist1=d,
                                    n_samples=len(refs), mbr_n=n))
    return reports


def mbr_sweep(model, table, grid, test_pairs, vocab, n_max: int, steps: int,
              seed: int = 0, src_len: int | None = None,
              tgt_len: int | None = None) -> list[MetricReport]:
    """Generate n_max candidates per test item (distinct seeds), then run
    the pool sweep against the references."""
    from .sample import SampleRequest, SamplerKind, sample_batch
    from .textspace import encode_pair

    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    pools = [[] for _ in test_pairs]
    encoded = [encode_pair(vocab, p.src, p.trg, src_len, tgt_len) for p in test_pairs]
    for j in range(n_max):
        reqs = [
            SampleRequest(src, tgt_len, steps, SamplerKind.FLOW_AVG,
                          seed=_candidate_seed(seed, i, j))
            for i, (src, _) in enumerate(encoded)
        ]
        ids, _, _ = sample_batch(model, table, grid, reqs)
        for i, out in enumerate(ids):
            pools[i].append(vocab.decode(out).split())
    refs = [p.trg.split() for p in test_pairs]
    return sweep_from_pool(pools, refs, n_max)


def _candidate_seed(seed: int, item: int, cand: int) -> int:
    # Candidate 0 must coincide with the single-sample seed for the item.
    return (seed * 1_000_003 + item) * 1_000_003 + cand


def reports_to_csv(reports: list[MetricReport]) -> str:
    lines = ["mbr_n,bleu,rouge_l,dist1,n_samples"]
    for r in reports:
        lines.append(f"{r.mbr_n},{r.bleu:.8g},{r.rouge_l:.8g},{r.dist1:.8g},{r.n_samples}")
    return "\n".join(lines) + "\n"
