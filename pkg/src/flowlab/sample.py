"""Samplers: the few-step average-velocity Euler loop, the
instantaneous-velocity variant, and the multi-step ancestral baseline,
plus trajectory recording and the straightness score.

A model is anything callable as model(z_in, t_input) -> full-length
prediction with a ``pred_target`` attribute; test oracles plug in the
same way as trained denoisers. Every request carries its own seed and
draws from an independent stream, so batched execution is bitwise
equivalent to one-at-a-time execution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .denoiser import PredTarget, extract_target
from .schedule import FlowTimeGrid, NoiseSchedule, ancestral_posterior
from .textspace import EmbeddingTable, round_tokens

__all__ = [
    "SamplerKind",
    "PredTargetError",
    "SampleRequest",
    "Trajectory",
    "average_velocity",
    "euler_step_avg",
    "flowlm_sample",
    "instant_velocity_sample",
    "diffusion_sample",
    "sample_batch",
    "straightness",
    "trajectory_to_csv",
]


class SamplerKind:
    FLOW_AVG = "FLOW_AVG"
    FLOW_INSTANT = "FLOW_INSTANT"
    DIFFUSION_ANCESTRAL = "DIFFUSION_ANCESTRAL"
    ALL = (FLOW_AVG, FLOW_INSTANT, DIFFUSION_ANCESTRAL)


class PredTargetError(TypeError):
    """Checkpoint prediction target does not match the requested sampler."""


@dataclass(frozen=True)
class SampleRequest:
    src_ids: tuple
    target_len: int
    steps: int
    kind: str = SamplerKind.FLOW_AVG
    record_trajectory: bool = False
    seed: int = 0
    clamp_latents: bool = False  # snap intermediate z0 predictions to embeddings

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.target_len < 1:
            raise ValueError("target_len must be >= 1")
        if self.kind not in SamplerKind.ALL:
            raise ValueError(f"kind must be one of {SamplerKind.ALL}")
        object.__setattr__(self, "src_ids", tuple(int(i) for i in self.src_ids))


@dataclass
class Trajectory:
    """Target-latent snapshots at strictly decreasing times from 1 to 0."""

    times: list[float]
    snapshots: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.snapshots)


def average_velocity(z_t: np.ndarray, z0_pred: np.ndarray, t: float) -> np.ndarray:
    """(z_t - z0_pred) / t: the mean slope from the current point to the
    predicted clean endpoint."""
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    if z_t.shape != z0_pred.shape:
        raise ValueError(f"shape mismatch: {z_t.shape} vs {z0_pred.shape}")
    return (z_t - z0_pred) / t


def euler_step_avg(z_t: np.ndarray, z0_pred: np.ndarray, t: float, dt: float) -> np.ndarray:
    """Convex combination (1 - dt/t) * z_t + (dt/t) * z0_pred; equal to
    z_t - average_velocity * dt up to rounding. dt = t lands exactly on
    the prediction."""
    if dt <= 0 or dt > t:
        raise ValueError(f"need 0 < dt <= t, got dt={dt}, t={t}")
    w = dt / t
    return (1.0 - w) * z_t + w * z0_pred


def _check_pred_target(model, expected: str, sampler: str) -> None:
    got = getattr(model, "pred_target", None)
    if got != expected:
        raise PredTargetError(
            f"{sampler} requires a {expected} model, got pred_target={got!r}"
        )


def _batch_init(reqs, dim: int) -> np.ndarray:
    """Per-request Gaussian init for the target block, one independent
    stream per seed."""
    inits = []
    for r in reqs:
        rng = np.random.default_rng(r.seed)
        inits.append(rng.standard_normal((r.target_len, dim)).astype(np.float32))
    return np.stack(inits)


def _clamp(z: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    return table.array[round_tokens(z, table)]


def _record(trajs, reqs, t: float, z_y: np.ndarray) -> None:
    for i, r in enumerate(reqs):
        if trajs[i] is not None:
            trajs[i].times.append(t)
            trajs[i].snapshots.append(z_y[i].copy())


def sample_batch(model, table: EmbeddingTable, proc, reqs: list[SampleRequest]):
    """Run one sampler kind over a batch of same-shape requests.

    Returns (token id arrays, trajectories, stats); stats carries the
    wall time of the latent-update loop alone and the number of network
    forwards, for the timing diagnostics.
    """
    if not reqs:
        raise ValueError("empty request batch")
    kind = reqs[0].kind
    if any(r.kind != kind for r in reqs):
        raise ValueError("mixed sampler kinds in one batch")
    if any(len(r.src_ids) != len(reqs[0].src_ids) or r.target_len != reqs[0].target_len
           for r in reqs):
        raise ValueError("requests in one batch must share src/target lengths")

    src = np.asarray([r.src_ids for r in reqs], dtype=np.int64)
    z_x = table.array[src]
    z_y = _batch_init(reqs, table.dim)
    trajs = [
        Trajectory([], [], meta={"sampler": kind, "steps": r.steps, "seed": r.seed,
                                 "position": 0})
        if r.record_trajectory else None
        for r in reqs
    ]

    if kind == SamplerKind.FLOW_AVG:
        _check_pred_target(model, PredTarget.Z0, kind)
        z_y, stats = _flow_loop(model, table, proc, reqs, z_x, z_y, trajs, average=True)
    elif kind == SamplerKind.FLOW_INSTANT:
        _check_pred_target(model, PredTarget.VELOCITY, kind)
        z_y, stats = _flow_loop(model, table, proc, reqs, z_x, z_y, trajs, average=False)
    else:
        _check_pred_target(model, PredTarget.Z0, kind)
        if not isinstance(proc, NoiseSchedule):
            raise ValueError("diffusion sampling requires a NoiseSchedule")
        if any(r.steps != proc.num_steps for r in reqs):
            raise ValueError(
                f"diffusion sampler runs exactly {proc.num_steps} steps; respacing is unsupported"
            )
        z_y, stats = _ancestral_loop(model, table, proc, reqs, z_x, z_y, trajs)

    ids = round_tokens(z_y, table)
    return [ids[i] for i in range(len(reqs))], trajs, stats


def _flow_loop(model, table, proc, reqs, z_x, z_y, trajs, *, average: bool):
    grid = proc if isinstance(proc, FlowTimeGrid) else FlowTimeGrid(num_steps=reqs[0].steps)
    rescale_max = grid.rescale_max
    n = reqs[0].steps
    if any(r.steps != n for r in reqs):
        raise ValueError("requests in one batch must share the step count")
    clamp = reqs[0].clamp_latents
    src_len = z_x.shape[1]
    forwards = 0
    _record(trajs, reqs, 1.0, z_y)
    t0 = time.perf_counter()
    for k in range(n, 0, -1):
        t = k / n
        dt = 1.0 / n
        t_input = t * rescale_max
        z_in = np.concatenate([z_x, z_y], axis=1)  # source re-set clean each step
        full = np.asarray(model(z_in, t_input))
        forwards += z_in.shape[0]
        pred = extract_target(full, src_len)
        if average:
            if clamp:
                pred = _clamp(pred, table)
            z_y = euler_step_avg(z_y, pred, t, dt)
        else:
            z_y = z_y - pred * dt
        _record(trajs, reqs, t - dt, z_y)
    loop_seconds = time.perf_counter() - t0
    return z_y, {"forwards": forwards, "loop_seconds": loop_seconds}


def _ancestral_loop(model, table, sched: NoiseSchedule, reqs, z_x, z_y, trajs):
    src_len = z_x.shape[1]
    num_steps = sched.num_steps
    clamp = reqs[0].clamp_latents
    rngs = [np.random.default_rng((r.seed, 1)) for r in reqs]
    forwards = 0
    _record(trajs, reqs, 1.0, z_y)
    t0 = time.perf_counter()
    for t_step in range(num_steps, 0, -1):
        t_input = 1000.0 * t_step / num_steps
        z_in = np.concatenate([z_x, z_y], axis=1)
        full = np.asarray(model(z_in, t_input))
        forwards += z_in.shape[0]
        pred = extract_target(full, src_len)
        if clamp:
            pred = _clamp(pred, table)
        noise = np.stack([
            rng.standard_normal(z_y.shape[1:]).astype(np.float32) for rng in rngs
        ])
        z_y = ancestral_posterior(z_y, pred, t_step, sched, noise)
        _record(trajs, reqs, (t_step - 1) / num_steps, z_y)
    loop_seconds = time.perf_counter() - t0
    return z_y, {"forwards": forwards, "loop_seconds": loop_seconds}


def flowlm_sample(model, table: EmbeddingTable, grid: FlowTimeGrid,
                  req: SampleRequest):
    """Average-velocity Euler sampling from t=1 to t=0 in req.steps
    evaluations; returns (token ids, trajectory or None)."""
    if req.kind != SamplerKind.FLOW_AVG:
        req = SampleRequest(req.src_ids, req.target_len, req.steps,
                            SamplerKind.FLOW_AVG, req.record_trajectory,
                            req.seed, req.clamp_latents)
    ids, trajs, _ = sample_batch(model, table, grid, [req])
    return ids[0], trajs[0]


def instant_velocity_sample(model, table: EmbeddingTable, grid: FlowTimeGrid,
                            req: SampleRequest):
    """Plain Euler on the predicted velocity field: z <- z - v_hat * dt."""
    if req.kind != SamplerKind.FLOW_INSTANT:
        req = SampleRequest(req.src_ids, req.target_len, req.steps,
                            SamplerKind.FLOW_INSTANT, req.record_trajectory,
                            req.seed, req.clamp_latents)
    ids, trajs, _ = sample_batch(model, table, grid, [req])
    return ids[0], trajs[0]


def diffusion_sample(model, table: EmbeddingTable, sched: NoiseSchedule,
                     req: SampleRequest):
    """Full-length ancestral reverse chain (num_steps network calls)."""
    if req.kind != SamplerKind.DIFFUSION_ANCESTRAL:
        req = SampleRequest(req.src_ids, req.target_len, req.steps,
                            SamplerKind.DIFFUSION_ANCESTRAL, req.record_trajectory,
                            req.seed, req.clamp_latents)
    ids, trajs, _ = sample_batch(model, table, sched, [req])
    return ids[0], trajs[0]


def straightness(traj: Trajectory) -> float:
    """Endpoint displacement over total arc length, in [0, 1]; defined as
    1.0 for a degenerate (zero-length) path."""
    if len(traj) < 2:
        raise ValueError("straightness needs at least 2 snapshots")
    pts = [s.reshape(-1).astype(np.float64) for s in traj.snapshots]
    arc = sum(float(np.linalg.norm(b - a)) for a, b in zip(pts, pts[1:]))
    if arc == 0.0:
        return 1.0
    disp = float(np.linalg.norm(pts[-1] - pts[0]))
    return disp / arc


def trajectory_to_csv(traj: Trajectory, position: int = 0) -> str:
    """CSV rows "k,t,dim0,dim1,..." for one designated target position;
    the position index is recorded in the trajectory metadata."""
    if not 0 <= position < traj.snapshots[0].shape[0]:
        raise ValueError(f"position {position} outside target block")
    traj.meta["position"] = position
    dim = traj.snapshots[0].shape[-1]
    lines = ["k,t," + ",".join(f"dim{i}" for i in range(dim))]
    for k, (t, snap) in enumerate(zip(traj.times, traj.snapshots)):
        vals = ",".join(f"{v:.8g}" for v in snap[position])
        lines.append(f"{k},{t:.8g},{vals}")
    return "\n".join(lines) + "\n"
