"""Training: diffusion pretraining of the denoiser, straight-flow
fine-tuning with the teacher regularizer, time-step sampling strategies,
Adam with warmup and global-norm clipping, and EMA bookkeeping.

One time step is drawn per optimization step and shared across the batch
(the loss breakdown records a single t). The fine-tune loss follows the
standard three-term form: target reconstruction (optionally 1/t^2
weighted), the cross-entropy anchor on the ground-truth target embedding,
and reg_rate * ||pred_ref - pred||^2 / t^2 against the frozen reference
model evaluated on the same input. The reference forward runs outside the
tape, so no gradient flows through the teacher.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .denoiser import Denoiser, PredTarget, extract_target
from .schedule import (
    FlowTimeGrid,
    NoiseSchedule,
    diffusion_forward,
    flow_interpolate,
    rescale_time,
)
from .textspace import EmbeddingTable, ce_anchor_loss, embed

__all__ = [
    "LossMode",
    "TimeStrategy",
    "TrainConfig",
    "LossBreakdown",
    "LossAwareHistory",
    "sample_timestep",
    "ema_update",
    "lr_at",
    "AdamOptimizer",
    "trainable_params",
    "DiffusionTrainer",
    "FlowTrainer",
    "train_loop",
    "loss_quartile_probe",
    "LOG_FIELDS",
]

LOG_FIELDS = ("step", "total", "recon", "ce", "reg", "t_used", "grad_norm", "lr")


class LossMode:
    X_LOSS = "X_LOSS"
    V_WEIGHTED = "V_WEIGHTED"
    ALL = (X_LOSS, V_WEIGHTED)


class TimeStrategy:
    UNIFORM = "UNIFORM"
    LOGIT_NORMAL = "LOGIT_NORMAL"
    LOSS_AWARE = "LOSS_AWARE"
    ALL = (UNIFORM, LOGIT_NORMAL, LOSS_AWARE)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    warmup_steps: int = 500
    dropout: float = 0.1
    ema_decay: float = 0.999
    flow_steps: int = 20            # size of the fine-tuning time grid
    reg_rate: float = 0.01
    loss_mode: str = LossMode.X_LOSS
    pred_target: str = PredTarget.Z0
    time_strategy: str = TimeStrategy.UNIFORM
    logit_mu: float = 0.0
    logit_sigma: float = 1.0
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.reg_rate < 0:
            raise ValueError("reg_rate must be >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in (0, 1)")
        if self.flow_steps < 1:
            raise ValueError("flow_steps must be >= 1")
        if self.loss_mode not in LossMode.ALL:
            raise ValueError(f"loss_mode must be one of {LossMode.ALL}")
        if self.pred_target not in PredTarget.ALL:
            raise ValueError(f"pred_target must be one of {PredTarget.ALL}")
        if self.time_strategy not in TimeStrategy.ALL:
            raise ValueError(f"time_strategy must be one of {TimeStrategy.ALL}")


@dataclass
class LossBreakdown:
    recon: float
    ce: float
    reg: float
    total: float
    t_used: float


class LossAwareHistory:
    """Per-bin importance weights from the running mean of the last
    `window` squared losses; uniform until every bin has >= `min_obs`
    observations."""

    def __init__(self, num_steps: int, window: int = 10, min_obs: int = 10):
        self.num_steps = num_steps
        self.min_obs = min_obs
        self.bins = [deque(maxlen=window) for _ in range(num_steps + 1)]  # 1-indexed

    def record(self, t_step: int, loss_value: float) -> None:
        self.bins[t_step].append(loss_value)

    def warmed_up(self) -> bool:
        return all(len(self.bins[t]) >= self.min_obs for t in range(1, self.num_steps + 1))

    def weights(self) -> np.ndarray:
        w = np.array(
            [np.mean(np.square(self.bins[t])) for t in range(1, self.num_steps + 1)]
        )
        total = w.sum()
        if total <= 0:
            return np.full(self.num_steps, 1.0 / self.num_steps)
        return w / total


def sample_timestep(strategy: str, num_steps: int, loss_history, rng: np.random.Generator,
                    mu: float = 0.0, sigma: float = 1.0) -> int:
    """Draw a training step index in {1..num_steps}."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if strategy == TimeStrategy.UNIFORM:
        return int(rng.integers(1, num_steps + 1))
    if strategy == TimeStrategy.LOGIT_NORMAL:
        u = 1.0 - 1.0 / (1.0 + math.exp(-(mu + sigma * rng.standard_normal())))
        return min(num_steps, max(1, math.ceil(u * num_steps)))
    if strategy == TimeStrategy.LOSS_AWARE:
        if loss_history is None or not loss_history.warmed_up():
            return int(rng.integers(1, num_steps + 1))
        return int(rng.choice(num_steps, p=loss_history.weights())) + 1
    raise ValueError(f"unknown time strategy {strategy!r}")


def ema_update(ema_params: dict[str, np.ndarray], params, decay: float) -> dict[str, np.ndarray]:
    """ema <- decay * ema + (1 - decay) * params, elementwise per array."""
    for name, value in params.items():
        arr = value.data if isinstance(value, nc.Tensor) else np.asarray(value)
        tgt = ema_params[name]
        if tgt.shape != arr.shape:
            raise ValueError(f"ema {name}: shape {tgt.shape} != {arr.shape}")
        tgt *= decay
        tgt += (1.0 - decay) * arr
    return ema_params


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over warmup_steps, constant afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


class AdamOptimizer:
    def __init__(self, params: dict[str, nc.Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float, clip: float = 1.0) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        sq = 0.0
        for g in grads.values():
            sq += float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
        norm = math.sqrt(sq)
        scale = clip / norm if (clip > 0 and norm > clip) else 1.0
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, tensor in self.params.items():
            g = grads[name] * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            tensor.data = tensor.data - (lr * update).astype(np.float32)
        return norm


def trainable_params(model: Denoiser, table: EmbeddingTable) -> dict[str, nc.Tensor]:
    out = {"embed.weight": table.weight}
    out.update({f"net.{k}": v for k, v in model.params.items()})
    return out


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------


def _to_loss(recon_t, ce_t, reg_t, t: float) -> tuple[nc.Tensor, LossBreakdown]:
    total = nc.add(nc.add(recon_t, ce_t), reg_t)
    bd = LossBreakdown(
        recon=recon_t.item(), ce=ce_t.item(), reg=reg_t.item(),
        total=total.item(), t_used=t,
    )
    return total, bd


def diffusion_step_losses(model: Denoiser, table: EmbeddingTable,
                          src_ids: np.ndarray, tgt_ids: np.ndarray,
                          sched: NoiseSchedule, t_step: int, eps: np.ndarray,
                          *, dropout: float = 0.0,
                          rng: np.random.Generator | None = None):
    """Partial-noising reconstruction plus the CE anchor; reg is zero."""
    if src_ids.shape[0] == 0:
        raise ValueError("empty batch")
    src_len = src_ids.shape[1]
    z_x = embed(src_ids, table)
    z0_y = embed(tgt_ids, table)
    z_t = diffusion_forward(z0_y, nc.Tensor(eps), t_step, sched)
    z_in = nc.concat([z_x, z_t], axis=1)
    t_in = rescale_time(t_step, sched.num_steps, model.config.time_rescale)
    pred = extract_target(model.forward(z_in, t_in, dropout=dropout, rng=rng), src_len)
    recon = nc.mse(z0_y, pred)
    ce = ce_anchor_loss(z0_y, tgt_ids, table)
    reg = nc.Tensor(np.float32(0.0))
    return _to_loss(recon, ce, reg, t_step / sched.num_steps)


def flow_step_losses(model: Denoiser, ref_model: Denoiser | None, table: EmbeddingTable,
                     src_ids: np.ndarray, tgt_ids: np.ndarray,
                     grid: FlowTimeGrid, t_step: int, eps: np.ndarray,
                     cfg: TrainConfig, *,
                     rng: np.random.Generator | None = None):
    """Straight-path reconstruction, CE anchor, and teacher regularizer."""
    if src_ids.shape[0] == 0:
        raise ValueError("empty batch")
    if t_step == 0:
        raise ValueError("t_step must be >= 1 (t=0 is never trained)")
    src_len = src_ids.shape[1]
    t = t_step / grid.num_steps
    z_x = embed(src_ids, table)
    z0_y = embed(tgt_ids, table)
    eps_t = nc.Tensor(eps)
    z_t = flow_interpolate(z0_y, eps_t, t)
    z_in = nc.concat([z_x, z_t], axis=1)
    t_in = rescale_time(t_step, grid.num_steps, grid.rescale_max)
    pred = extract_target(
        model.forward(z_in, t_in, dropout=cfg.dropout, rng=rng), src_len
    )

    target = z0_y if cfg.pred_target == PredTarget.Z0 else nc.sub(eps_t, z0_y)
    base = nc.mse(target, pred)
    recon = base if cfg.loss_mode == LossMode.X_LOSS else nc.smul(base, 1.0 / (t * t))

    ce = ce_anchor_loss(z0_y, tgt_ids, table)

    if ref_model is not None and cfg.reg_rate > 0.0:
        ref_pred = extract_target(ref_model(z_in.data, t_in), src_len)
        reg = nc.smul(nc.mse(pred, nc.Tensor(ref_pred)), cfg.reg_rate / (t * t))
    else:
        reg = nc.Tensor(np.float32(0.0))
    return _to_loss(recon, ce, reg, t)


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


class _TrainerBase:
    def __init__(self, model: Denoiser, table: EmbeddingTable, cfg: TrainConfig,
                 log_sink=None):
        self.model = model
        self.table = table
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.params = trainable_params(model, table)
        self.opt = AdamOptimizer(self.params)
        self.ema = {k: t.data.copy() for k, t in self.params.items()}
        self.step_count = 0
        self.log_sink = log_sink

    def _apply(self, ctx: nc.GradContext, total: nc.Tensor, bd: LossBreakdown) -> None:
        if not math.isfinite(bd.total):
            for name in ("recon", "ce", "reg"):
                if not math.isfinite(getattr(bd, name)):
                    raise FloatingPointError(f"non-finite loss term: {name}={getattr(bd, name)}")
            raise FloatingPointError(f"non-finite total loss {bd.total}")
        grad_map = ctx.backward(total)
        grads = {}
        for name, tensor in self.params.items():
            g = grad_map.get(tensor)
            grads[name] = g if g is not None else np.zeros_like(tensor.data)
        self.step_count += 1
        lr = lr_at(self.step_count, self.cfg)
        norm = self.opt.step(grads, lr, clip=self.cfg.grad_clip)
        ema_update(self.ema, self.params, self.cfg.ema_decay)
        if self.log_sink is not None:
            self.log_sink(
                f"{self.step_count}\t{bd.total:.6g}\t{bd.recon:.6g}\t{bd.ce:.6g}"
                f"\t{bd.reg:.6g}\t{bd.t_used:.6g}\t{norm:.6g}\t{lr:.6g}"
            )
        self.last_grad_norm = norm


class DiffusionTrainer(_TrainerBase):
    """One writer over (model, table) running the partial-noising objective.

    Time steps follow cfg.time_strategy over the full diffusion chain
    (the multi-step baseline convention is loss-aware sampling).
    """

    def __init__(self, model, table, sched: NoiseSchedule, cfg: TrainConfig, log_sink=None):
        super().__init__(model, table, cfg, log_sink)
        self.sched = sched
        self.loss_history = LossAwareHistory(sched.num_steps)

    def step(self, src_ids: np.ndarray, tgt_ids: np.ndarray,
             t_step: int | None = None) -> LossBreakdown:
        if t_step is None:
            t_step = sample_timestep(
                self.cfg.time_strategy, self.sched.num_steps, self.loss_history,
                self.rng, mu=self.cfg.logit_mu, sigma=self.cfg.logit_sigma,
            )
        eps = self.rng.standard_normal(
            (tgt_ids.shape[0], tgt_ids.shape[1], self.table.dim)
        ).astype(np.float32)
        with nc.GradContext() as ctx:
            total, bd = diffusion_step_losses(
                self.model, self.table, src_ids, tgt_ids, self.sched, t_step, eps,
                dropout=self.cfg.dropout, rng=self.rng,
            )
            self._apply(ctx, total, bd)
        self.loss_history.record(t_step, bd.recon)
        return bd


class FlowTrainer(_TrainerBase):
    """Straight-flow fine-tuning against a frozen reference model."""

    def __init__(self, model, table, ref_model: Denoiser | None, grid: FlowTimeGrid,
                 cfg: TrainConfig, log_sink=None):
        super().__init__(model, table, cfg, log_sink)
        self.ref_model = ref_model
        self.grid = grid
        self.loss_history = LossAwareHistory(grid.num_steps)

    def step(self, src_ids: np.ndarray, tgt_ids: np.ndarray,
             t_step: int | None = None) -> LossBreakdown:
        if t_step is None:
            t_step = sample_timestep(
                self.cfg.time_strategy, self.grid.num_steps, self.loss_history,
                self.rng, mu=self.cfg.logit_mu, sigma=self.cfg.logit_sigma,
            )
        eps = self.rng.standard_normal(
            (tgt_ids.shape[0], tgt_ids.shape[1], self.table.dim)
        ).astype(np.float32)
        with nc.GradContext() as ctx:
            total, bd = flow_step_losses(
                self.model, self.ref_model, self.table, src_ids, tgt_ids,
                self.grid, t_step, eps, self.cfg, rng=self.rng,
            )
            self._apply(ctx, total, bd)
        self.loss_history.record(t_step, bd.recon)
        return bd


def train_loop(trainer, src_ids: np.ndarray, tgt_ids: np.ndarray,
               epochs: int, batch_size: int) -> list[LossBreakdown]:
    """Epochs of deterministically shuffled minibatches; batch assembly
    order is fixed by the trainer seed so runs are reproducible."""
    n = src_ids.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    history = []
    for _ in range(epochs):
        order = trainer.rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            history.append(trainer.step(src_ids[idx], tgt_ids[idx]))
    return history


# ---------------------------------------------------------------------------
# Loss-quartile probe
# ---------------------------------------------------------------------------


def loss_quartile_probe(model, table: EmbeddingTable, proc,
                        src_ids: np.ndarray, tgt_ids: np.ndarray,
                        seed: int = 0, batch_size: int = 64,
                        rescale_max: float = 1000.0):
    """Mean plain reconstruction loss per contiguous quarter of the time
    grid; q0 is nearest clean data. `proc` selects the corruption: a
    NoiseSchedule probes the diffusion forward map, a FlowTimeGrid probes
    straight interpolation. No gradients; fixed noise seeds keep the
    comparison paired across checkpoints.
    """
    if src_ids.shape[0] == 0:
        raise ValueError("empty probe set")
    is_flow = isinstance(proc, FlowTimeGrid)
    num_steps = proc.num_steps
    rng = np.random.default_rng(seed)
    src_len = src_ids.shape[1]
    step_losses = np.zeros(num_steps)
    n = src_ids.shape[0]

    z_x_all = table.array[src_ids]
    z0_all = table.array[tgt_ids]
    for t_step in range(1, num_steps + 1):
        t = t_step / num_steps
        acc = 0.0
        for lo in range(0, n, batch_size):
            z_x = z_x_all[lo:lo + batch_size]
            z0 = z0_all[lo:lo + batch_size]
            eps = rng.standard_normal(z0.shape).astype(np.float32)
            if is_flow:
                z_t = flow_interpolate(z0, eps, t)
                t_in = rescale_time(t_step, num_steps, proc.rescale_max)
            else:
                z_t = diffusion_forward(z0, eps, t_step, proc)
                t_in = rescale_time(t_step, num_steps, rescale_max)
            z_in = np.concatenate([z_x, z_t], axis=1).astype(np.float32)
            pred = extract_target(np.asarray(model(z_in, t_in)), src_len)
            acc += float(np.mean((z0 - pred) ** 2)) * z0.shape[0]
        step_losses[t_step - 1] = acc / n

    quarters = np.array_split(step_losses, 4)
    return tuple(float(q.mean()) for q in quarters)
