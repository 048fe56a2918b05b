"""JSONL dataset manifests.

One JSON object per line with paths for a mixture, its target, the
enrollment utterance, and optionally the noise that was added. Paths are
resolved relative to the manifest file's directory.
"""

import json
import os
from dataclasses import dataclass

from .wavio import wav_read


@dataclass
class Record:
    mixture: str
    target: str
    enrollment: str
    noise: str | None = None

    def to_json(self):
        d = {"mixture": self.mixture, "target": self.target, "enrollment": self.enrollment}
        if self.noise is not None:
            d["noise"] = self.noise
        return json.dumps(d, sort_keys=True)


REQUIRED = ("mixture", "target", "enrollment")


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e})") from None
            missing = [k for k in REQUIRED if k not in obj]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing keys {missing}")
            rec = Record(
                mixture=obj["mixture"],
                target=obj["target"],
                enrollment=obj["enrollment"],
                noise=obj.get("noise"),
            )
            for key in REQUIRED + (("noise",) if rec.noise else ()):
                p = os.path.join(base, getattr(rec, key))
                if not os.path.exists(p):
                    raise ValueError(f"{path}:{lineno}: {key} file not found: {p}")
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return records


def save_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return path


def load_record_audio(manifest_path, rec: Record):
    """Read the three (or four) waveforms of a record, enforcing a single
    sample rate. Returns (sample_rate, mixture, target, enrollment)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    waves = {}
    rate = None
    keys = REQUIRED + (("noise",) if rec.noise else ())
    for key in keys:
        wf = wav_read(os.path.join(base, getattr(rec, key)))
        if rate is None:
            rate = wf.sample_rate
        elif wf.sample_rate != rate:
            raise ValueError(
                f"record mixes sample rates: {key} has {wf.sample_rate}, expected {rate}"
            )
        waves[key] = wf.samples
    return rate, waves["mixture"], waves["target"], waves["enrollment"]
