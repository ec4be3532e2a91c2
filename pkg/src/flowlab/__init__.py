"""flowlab: diffusion-to-flow seq2seq text generation at desk scale.

Subpackages map one-to-one onto the build's layers: numcore (tensors and
reverse-mode autodiff), textspace (vocab, embeddings, rounding), schedule
(noise schedules, flow grid, time bookkeeping), denoiser (the bidirectional
transformer), train (pretraining, flow fine-tuning, optimization), sample
(few-step and ancestral samplers, trajectories), metrics (BLEU / ROUGE-L /
dist-1 / MBR), diagnose (quartile tables, gradient traces, timing,
straightness), corpus (synthetic seq2seq tasks, JSONL), checkpoint
(persistence), and cli (command-line orchestration).

Set FLOWLAB_THREADS to cap BLAS/worker parallelism; it is applied before
numpy is first imported by this package when possible.
"""

import os as _os

_threads = _os.environ.get("FLOWLAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import numcore  # noqa: E402
from . import schedule  # noqa: E402
from . import textspace  # noqa: E402
from . import corpus  # noqa: E402
from . import denoiser  # noqa: E402
from . import train  # noqa: E402
from . import sample  # noqa: E402
from . import metrics  # noqa: E402
from . import diagnose  # noqa: E402
from . import checkpoint  # noqa: E402

__version__ = "0.1.0"
__all__ = [
    "numcore",
    "schedule",
    "textspace",
    "corpus",
    "denoiser",
    "train",
    "sample",
    "metrics",
    "diagnose",
    "checkpoint",
]
