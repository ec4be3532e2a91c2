"""The denoising network: a small pre-layer-norm bidirectional transformer
over the concatenated [source ; noised target] latent sequence.

Latents of width d are projected to hidden width h, combined with learned
positional embeddings and a sinusoidal-plus-MLP embedding of the rescaled
time input, passed through full-attention blocks (no causal mask), and
projected back to width d. The interpretation of the output rows (clean
latents vs transport velocity) is fixed per checkpoint by pred_target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc

__all__ = ["PredTarget", "DenoiserConfig", "Denoiser", "extract_target", "sinusoidal_embedding"]


class PredTarget:
    Z0 = "Z0"
    VELOCITY = "VELOCITY"
    ALL = (Z0, VELOCITY)


@dataclass(frozen=True)
class DenoiserConfig:
    embed_dim: int = 32      # latent width d
    hidden_dim: int = 64     # transformer width h
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 64
    time_rescale: float = 1000.0
    pred_target: str = PredTarget.Z0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must divide evenly into heads")
        if self.pred_target not in PredTarget.ALL:
            raise ValueError(f"pred_target must be one of {PredTarget.ALL}")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_len": self.max_len,
            "time_rescale": self.time_rescale,
            "pred_target": self.pred_target,
        }


def sinusoidal_embedding(t_input: float, dim: int) -> np.ndarray:
    """Classic sin/cos features of the rescaled time input."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = t_input * freqs
    out = np.concatenate([np.sin(ang), np.cos(ang)])
    if out.size < dim:
        out = np.concatenate([out, np.zeros(dim - out.size)])
    return out.astype(np.float32)


class Denoiser:
    """Parameter container plus the forward pass.

    ``forward`` runs on numcore Tensors and is recorded when a GradContext
    is active; ``__call__`` is the inference path on raw arrays (same
    code, nothing recorded, dropout off). ``forward_calls`` counts network
    evaluations per batch item, for the sampler/timing assertions.
    """

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, nc.Tensor] = {}
        self.forward_calls = 0
        c = config
        h, d = c.hidden_dim, c.embed_dim

        def param(name, shape, scale):
            self.params[name] = nc.Tensor(
                (scale * rng.standard_normal(shape)).astype(np.float32),
                requires_grad=True,
            )

        def zeros(name, shape):
            self.params[name] = nc.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

        def ones(name, shape):
            self.params[name] = nc.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

        param("w_in", (d, h), 1.0 / math.sqrt(d))
        zeros("b_in", (h,))
        param("pos", (c.max_len, h), 0.02)
        param("time_w1", (h, h), 1.0 / math.sqrt(h))
        zeros("time_b1", (h,))
        param("time_w2", (h, h), 1.0 / math.sqrt(h))
        zeros("time_b2", (h,))
        for i in range(c.n_layers):
            p = f"layer{i}."
            ones(p + "ln1_g", (h,))
            zeros(p + "ln1_b", (h,))
            for w in ("wq", "wk", "wv", "wo"):
                param(p + w, (h, h), 1.0 / math.sqrt(h))
            zeros(p + "bo", (h,))
            ones(p + "ln2_g", (h,))
            zeros(p + "ln2_b", (h,))
            param(p + "ff_w1", (h, 4 * h), 1.0 / math.sqrt(h))
            zeros(p + "ff_b1", (4 * h,))
            param(p + "ff_w2", (4 * h, h), 1.0 / math.sqrt(4 * h))
            zeros(p + "ff_b2", (h,))
        ones("lnf_g", (h,))
        zeros("lnf_b", (h,))
        param("w_out", (h, d), 1.0 / math.sqrt(h))
        zeros("b_out", (d,))

    @property
    def pred_target(self) -> str:
        return self.config.pred_target

    def param_items(self):
        return sorted(self.params.items())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.param_items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            src = arrays[name]
            if src.shape != t.shape:
                raise ValueError(f"param {name}: shape {src.shape} != {t.shape}")
            t.data = np.asarray(src, dtype=np.float32, order="C").copy()

    def clone(self) -> "Denoiser":
        twin = Denoiser(self.config, np.random.default_rng(0))
        twin.load_state({k: v.copy() for k, v in self.state_arrays().items()})
        return twin

    def forward(self, z_in: nc.Tensor, t_input: float, *, dropout: float = 0.0,
                rng: np.random.Generator | None = None) -> nc.Tensor:
        """Full-length prediction rows for a (L, d) or (B, L, d) input."""
        c = self.config
        p = self.params
        squeeze = False
        if len(z_in.shape) == 2:
            z_in = nc.reshape(z_in, (1,) + tuple(z_in.shape))
            squeeze = True
        batch, length, width = z_in.shape
        if width != c.embed_dim:
            raise ValueError(f"latent width {width} != embed_dim {c.embed_dim}")
        if length > c.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {c.max_len}")
        if not 0.0 <= t_input <= c.time_rescale:
            raise ValueError(f"t_input {t_input} outside [0, {c.time_rescale}]")
        self.forward_calls += batch

        basis = nc.Tensor(sinusoidal_embedding(t_input, c.hidden_dim))
        te = nc.gelu(nc.add(nc.matmul(nc.reshape(basis, (1, -1)), p["time_w1"]), p["time_b1"]))
        te = nc.add(nc.matmul(te, p["time_w2"]), p["time_b2"])
        te = nc.reshape(te, (c.hidden_dim,))

        x = nc.add(nc.matmul(z_in, p["w_in"]), p["b_in"])
        x = nc.add(x, nc.slice_axis(p["pos"], 0, 0, length))
        x = nc.add(x, te)

        nh, hd = c.n_heads, c.hidden_dim // c.n_heads
        scale = 1.0 / math.sqrt(hd)
        for i in range(c.n_layers):
            q = f"layer{i}."
            a = nc.layer_norm(x, p[q + "ln1_g"], p[q + "ln1_b"])

            def heads(t):
                t = nc.reshape(t, (batch, length, nh, hd))
                return nc.swap_axes(t, 1, 2)  # (B, H, L, hd)

            qh = heads(nc.matmul(a, p[q + "wq"]))
            kh = heads(nc.matmul(a, p[q + "wk"]))
            vh = heads(nc.matmul(a, p[q + "wv"]))
            scores = nc.smul(nc.matmul(qh, nc.swap_axes(kh, 2, 3)), scale)
            probs = nc.softmax(scores)  # full bidirectional attention
            ctx = nc.matmul(probs, vh)
            ctx = nc.reshape(nc.swap_axes(ctx, 1, 2), (batch, length, c.hidden_dim))
            attn = nc.add(nc.matmul(ctx, p[q + "wo"]), p[q + "bo"])
            x = nc.add(x, self._drop(attn, dropout, rng))

            f = nc.layer_norm(x, p[q + "ln2_g"], p[q + "ln2_b"])
            f = nc.gelu(nc.add(nc.matmul(f, p[q + "ff_w1"]), p[q + "ff_b1"]))
            f = nc.add(nc.matmul(f, p[q + "ff_w2"]), p[q + "ff_b2"])
            x = nc.add(x, self._drop(f, dropout, rng))

        x = nc.layer_norm(x, p["lnf_g"], p["lnf_b"])
        out = nc.add(nc.matmul(x, p["w_out"]), p["b_out"])
        if squeeze:
            out = nc.reshape(out, (length, c.embed_dim))
        return out

    @staticmethod
    def _drop(t: nc.Tensor, rate: float, rng: np.random.Generator | None) -> nc.Tensor:
        if rate <= 0.0:
            return t
        if rng is None:
            raise ValueError("dropout requires an rng")
        keep = (rng.random(t.shape) >= rate).astype(np.float32) / (1.0 - rate)
        return nc.mul(t, nc.Tensor(keep))

    def __call__(self, z_in: np.ndarray, t_input: float) -> np.ndarray:
        """Inference on raw arrays: deterministic, nothing recorded."""
        return self.forward(nc.Tensor(np.asarray(z_in, dtype=np.float32)), t_input).data


def extract_target(full_pred, src_len: int):
    """Rows [src_len, L) of the full-length prediction (last axis is the
    latent width, rows are the second-to-last axis)."""
    length = full_pred.shape[-2]
    if not 0 < src_len < length:
        raise ValueError(f"src_len {src_len} outside (0, {length})")
    if isinstance(full_pred, nc.Tensor):
        axis = len(full_pred.shape) - 2
        return nc.slice_axis(full_pred, axis, src_len, length)
    return np.asarray(full_pred)[..., src_len:, :]
