"""Streaming causal target-speech extraction.

A masking extractor conditioned on an enrollment utterance, extended
with a per-frame speaker embedding computed from the engine's own
delayed output and fused with the enrollment embedding. Ships with
frame-level streaming inference, three training schedules, evaluation
metrics, and a CLI workbench.
"""

from . import architecture, metrics, numerics, streaming, training, workbench
from .kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = [
    "architecture",
    "metrics",
    "numerics",
    "streaming",
    "training",
    "workbench",
    "kernel_backend",
]
