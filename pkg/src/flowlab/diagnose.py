"""Read-only diagnostics over trained checkpoints: sampler wall-clock
timing, gradient-norm traces parsed from training logs, paired
loss-quartile tables, and straightness statistics.

Timing measures only the latent-update loop (network forwards included;
source embedding and argmax decoding excluded) and reports the median
over repeats per batch item. Every diagnostic leaves checkpoint
parameters bit-identical.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np

from .sample import SampleRequest, SamplerKind, sample_batch, straightness
from .schedule import NoiseSchedule
from .textspace import EmbeddingTable
from .train import LOG_FIELDS, loss_quartile_probe

__all__ = [
    "DiagnosticsBundle",
    "GradNormSummary",
    "time_sampler",
    "grad_norm_trace",
    "quartile_report",
    "straightness_report",
    "quartiles_to_csv",
    "straightness_to_csv",
    "timing_to_csv",
]


@dataclass
class GradNormSummary:
    series: list[float]
    mean: float
    p95: float
    max: float


@dataclass
class DiagnosticsBundle:
    quartiles: dict[str, tuple] = field(default_factory=dict)
    grad_norms: GradNormSummary | None = None
    timing: dict[tuple[str, int], float] = field(default_factory=dict)
    straightness_stats: dict[str, tuple] = field(default_factory=dict)


def time_sampler(model, table: EmbeddingTable, proc, kind: str, steps: int,
                 batch: int, repeats: int, *, src_ids, target_len: int,
                 seed: int = 0) -> float:
    """Median seconds per sample of the latent-update loop.

    Asserts the loop performed exactly steps x batch network forwards.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    reqs = [
        SampleRequest(src_ids, target_len, steps, kind, seed=seed + i)
        for i in range(batch)
    ]
    times = []
    for _ in range(repeats):
        before = getattr(model, "forward_calls", 0)
        _, _, stats = sample_batch(model, table, proc, reqs)
        if hasattr(model, "forward_calls"):
            did = model.forward_calls - before
            expected = steps * batch
            if did != expected:
                raise AssertionError(f"expected {expected} forwards, counted {did}")
        times.append(stats["loop_seconds"] / batch)
    return statistics.median(times)


def grad_norm_trace(lines) -> GradNormSummary:
    """Parse per-step pre-clip gradient norms from training-log lines.

    Accepts an iterable of lines or a path; malformed lines raise with
    their 1-based index.
    """
    if isinstance(lines, (str, bytes)):
        with open(lines, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    series = []
    field_count = len(LOG_FIELDS)
    norm_col = LOG_FIELDS.index("grad_norm")
    for i, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != field_count:
            raise ValueError(f"log line {i}: expected {field_count} tab-separated fields")
        try:
            series.append(float(parts[norm_col]))
        except ValueError as e:
            raise ValueError(f"log line {i}: non-numeric gradient norm {parts[norm_col]!r}") from e
    if not series:
        raise ValueError("empty training log")
    arr = np.asarray(series)
    return GradNormSummary(
        series=series,
        mean=float(arr.mean()),
        p95=float(np.percentile(arr, 95)),
        max=float(arr.max()),
    )


def _params_fingerprint(model, table) -> bytes:
    chunks = [table.weight.data.tobytes()]
    chunks.extend(t.data.tobytes() for _, t in model.param_items())
    return b"".join(chunks)


def quartile_report(diff_model, diff_table, diff_sched: NoiseSchedule,
                    flow_model, flow_table, flow_grid,
                    src_ids, tgt_ids, *, seed: int = 0,
                    diff_vocab_hash: str | None = None,
                    flow_vocab_hash: str | None = None):
    """Paired Table-1-style quartile rows for the two checkpoints, each
    probed under its own corruption process with shared noise seeds."""
    if diff_vocab_hash is not None and flow_vocab_hash is not None \
            and diff_vocab_hash != flow_vocab_hash:
        raise ValueError("checkpoints were trained against different vocabularies")
    before = _params_fingerprint(diff_model, diff_table), _params_fingerprint(flow_model, flow_table)
    diff_row = loss_quartile_probe(diff_model, diff_table, diff_sched,
                                   src_ids, tgt_ids, seed=seed)
    flow_row = loss_quartile_probe(flow_model, flow_table, flow_grid,
                                   src_ids, tgt_ids, seed=seed)
    after = _params_fingerprint(diff_model, diff_table), _params_fingerprint(flow_model, flow_table)
    assert before == after, "diagnostics must not mutate checkpoint parameters"
    return diff_row, flow_row


def straightness_report(model, table, proc, kind: str, steps: int,
                        prompts, target_len: int, seed: int = 0):
    """Per-prompt straightness of recorded trajectories; returns
    (values, (mean, min, max))."""
    reqs = [
        SampleRequest(src, target_len, steps, kind, record_trajectory=True,
                      seed=seed + i)
        for i, src in enumerate(prompts)
    ]
    _, trajs, _ = sample_batch(model, table, proc, reqs)
    values = [straightness(t) for t in trajs]
    stats = (float(np.mean(values)), float(np.min(values)), float(np.max(values)))
    return values, stats


def quartiles_to_csv(rows: dict[str, tuple]) -> str:
    lines = ["model,q0,q1,q2,q3"]
    for name, q in rows.items():
        lines.append(name + "," + ",".join(f"{v:.8g}" for v in q))
    return "\n".join(lines) + "\n"


def straightness_to_csv(stats: dict[str, tuple]) -> str:
    lines = ["model,mean,min,max"]
    for name, (mean, mn, mx) in stats.items():
        lines.append(f"{name},{mean:.8g},{mn:.8g},{mx:.8g}")
    return "\n".join(lines) + "\n"


def timing_to_csv(timing: dict[tuple[str, int], float]) -> str:
    lines = ["sampler,steps,seconds_per_sample"]
    for (kind, steps), secs in timing.items():
        lines.append(f"{kind},{steps},{secs:.6g}")
    return "\n".join(lines) + "\n"
