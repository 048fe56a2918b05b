"""Mono WAV reading and writing via struct.

Supports linear PCM16 and IEEE float32, the two encodings the toolchain
produces. Anything else (compressed formats, multichannel files,
malformed headers) raises WavError with a message naming the problem.
"""

import struct
from dataclasses import dataclass

import numpy as np


class WavError(ValueError):
    pass


@dataclass
class WavFile:
    sample_rate: int
    samples: np.ndarray  # float32, 1-D

    def __post_init__(self):
        self.samples = np.asarray(self.samples, np.float32).ravel()
        if self.sample_rate < 1:
            raise WavError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate


def wav_read(path) -> WavFile:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: malformed header (not a RIFF/WAVE file)")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavError(f"{path}: truncated chunk {cid!r}")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise WavError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise WavError(f"{path}: {channels} channels unsupported (mono only)")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(payload, "<i2").astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(payload, "<f4").astype(np.float32)
    else:
        raise WavError(
            f"{path}: unsupported encoding (format {audio_format}, {bits} bits); "
            "expected PCM16 or float32"
        )
    return WavFile(sample_rate=rate, samples=samples)


def wav_write(path, wav: WavFile, encoding="float32"):
    if encoding == "float32":
        fmt_code, bits = 3, 32
        payload = np.asarray(wav.samples, np.float32).tobytes()
    elif encoding == "pcm16":
        fmt_code, bits = 1, 16
        clipped = np.clip(wav.samples, -1.0, 1.0)
        ints = np.round(clipped.astype(np.float64) * 32768.0)
        payload = np.clip(ints, -32768, 32767).astype("<i2").tobytes()
    else:
        raise WavError(f"unknown encoding {encoding!r} (expected 'float32' or 'pcm16')")
    byte_rate = wav.sample_rate * bits // 8
    block_align = bits // 8
    fmt_chunk = struct.pack(
        "<HHIIHH", fmt_code, 1, wav.sample_rate, byte_rate, block_align, bits
    )
    body = b"WAVE"
    body += b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)
    return path
