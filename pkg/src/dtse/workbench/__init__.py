"""File formats, synthesis, and the command-line interface."""

from . import checkpoint_io, manifest, synth, wavio
from .checkpoint_io import CheckpointError, ckpt_load, ckpt_save
from .wavio import WavError, WavFile, wav_read, wav_write

__all__ = [
    "checkpoint_io",
    "manifest",
    "synth",
    "wavio",
    "CheckpointError",
    "ckpt_load",
    "ckpt_save",
    "WavError",
    "WavFile",
    "wav_read",
    "wav_write",
]
