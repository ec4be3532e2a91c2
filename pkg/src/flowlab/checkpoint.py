"""Checkpoint persistence and run configuration.

Checkpoint layout: one JSON header line terminated by a newline, followed
by raw little-endian float32 arrays in header-declared order. The header
carries the format version, model hyperparameters (including the
prediction target), sequence layout, vocab hash, training phase, step
count, and seed; loading verifies the vocab hash and reproduces every
array bit-exactly.

RunConfig parsing is fail-closed: unknown keys anywhere in the JSON
document are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig
from .textspace import EmbeddingTable, Vocab

__all__ = [
    "CheckpointError",
    "VocabHashError",
    "ConfigError",
    "FORMAT_NAME",
    "FORMAT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointBundle",
    "RunConfig",
    "DataSection",
    "ModelSection",
    "TrainSection",
    "SampleSection",
    "CorpusSection",
]

FORMAT_NAME = "flowlab-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed checkpoint file or incompatible metadata."""


class VocabHashError(CheckpointError):
    """Checkpoint was trained against a different vocabulary."""


class ConfigError(ValueError):
    """Invalid or unknown keys in a run configuration document."""


@dataclass
class CheckpointBundle:
    model: Denoiser
    table: EmbeddingTable
    ema: dict[str, np.ndarray]
    header: dict

    def ema_view(self) -> tuple[Denoiser, EmbeddingTable]:
        """Model/table rebuilt from the EMA arrays (originals untouched)."""
        model = self.model.clone()
        model.load_state({
            k[len("net."):]: v for k, v in self.ema.items() if k.startswith("net.")
        })
        table = EmbeddingTable.from_array(self.ema["embed.weight"])
        return model, table


def save_checkpoint(path, model: Denoiser, table: EmbeddingTable,
                    ema: dict[str, np.ndarray], vocab: Vocab, *,
                    trained_as: str, src_len: int, tgt_len: int,
                    train_step: int, seed: int,
                    diffusion_steps: int | None = None,
                    flow_steps: int | None = None) -> None:
    params = {"embed.weight": table.weight.data}
    params.update({f"net.{k}": t.data for k, t in model.param_items()})
    arrays = dict(params)
    arrays.update({f"ema/{k}": np.asarray(v) for k, v in sorted(ema.items())})

    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "model": model.config.to_dict(),
        "pred_target": model.config.pred_target,
        "vocab_hash": vocab.content_hash(),
        "vocab_size": len(vocab),
        "src_len": src_len,
        "tgt_len": tgt_len,
        "trained_as": trained_as,
        "diffusion_steps": diffusion_steps,
        "flow_steps": flow_steps,
        "train_step": train_step,
        "seed": seed,
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, vocab: Vocab) -> CheckpointBundle:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header ({e})") from e
        if header.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        if header["vocab_hash"] != vocab.content_hash():
            raise VocabHashError(
                f"{path}: checkpoint vocab hash does not match the supplied vocab"
            )
        arrays: dict[str, np.ndarray] = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise CheckpointError(f"{path}: truncated array {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after declared arrays")

    config = DenoiserConfig(**header["model"])
    model = Denoiser(config, np.random.default_rng(0))
    model.load_state({
        k[len("net."):]: v for k, v in arrays.items() if k.startswith("net.")
    })
    table = EmbeddingTable.from_array(arrays["embed.weight"])
    ema = {k[len("ema/"):]: v for k, v in arrays.items() if k.startswith("ema/")}
    return CheckpointBundle(model=model, table=table, ema=ema, header=header)


# ---------------------------------------------------------------------------
# Run configuration (strict JSON)
# ---------------------------------------------------------------------------


def _strict(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**data)


@dataclass
class DataSection:
    train: str = "data/train.jsonl"
    valid: str = "data/valid.jsonl"
    test: str = "data/test.jsonl"
    vocab: str = "data/vocab.txt"
    src_len: int = 13
    tgt_len: int = 13


@dataclass
class ModelSection:
    embed_dim: int = 32
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 64
    time_rescale: float = 1000.0


@dataclass
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    warmup_steps: int = 500
    dropout: float = 0.1
    ema_decay: float = 0.999
    flow_steps: int = 20
    reg_rate: float = 0.01
    loss_mode: str = "X_LOSS"
    pred_target: str = "Z0"
    time_strategy: str = "UNIFORM"
    logit_mu: float = 0.0
    logit_sigma: float = 1.0
    grad_clip: float = 1.0


@dataclass
class SampleSection:
    steps: int = 5
    sampler: str = "flow-avg"
    mbr: int = 1


@dataclass
class CorpusSection:
    task: str = "REVERSE"
    n: int = 2000
    len_min: int = 8
    len_max: int = 12
    vocab_size: int = 32
    fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    out_dir: str = "data"


@dataclass
class RunConfig:
    seed: int = 0
    diffusion_steps: int = 200
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root: expected an object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"config root: unknown keys {unknown}")
        sections = {
            "data": DataSection, "model": ModelSection, "train": TrainSection,
            "sample": SampleSection, "corpus": CorpusSection,
        }
        kwargs = {}
        for key, val in doc.items():
            if key in sections:
                kwargs[key] = _strict(sections[key], val, key)
            else:
                kwargs[key] = val
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from e
        return cls.from_dict(doc)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)
