#!/usr/bin/env python3
"""Compare the numba and pure-numpy kernel backends.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N] [--frames T] [--json]

Also reports the streaming real-time factor of the default model so the
backend comparison can be read against the end-to-end budget.
"""

import argparse
import json
import sys

from dtse import architecture, streaming
from dtse.kernels import BACKEND, bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--frames", type=int, default=999)
    ap.add_argument("--duration", type=float, default=3.0,
                    help="seconds of audio for the streaming RTF measurement")
    ap.add_argument("--skip-stream", action="store_true")
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = ap.parse_args()

    results = bench.run(repeats=args.repeats, frames=args.frames)
    out = {"active_backend": BACKEND, "kernels": results}
    if not args.skip_stream:
        cfg = architecture.ModelConfig()
        ckpt = architecture.init_checkpoint(cfg, seed=0)
        report = streaming.measure(cfg, ckpt, duration_s=args.duration)
        out["stream"] = report.to_dict()

    if args.json:
        json.dump(out, sys.stdout, indent=2, sort_keys=True)
        print()
    else:
        print(f"active backend: {BACKEND}")
        print(bench.format_table(results))
        if "stream" in out:
            s = out["stream"]
            print(
                f"streaming (default config, dynamic): rtf={s['rtf']:.3f} "
                f"hop={s['hop_latency_ms']:.1f}ms window={s['window_latency_ms']:.1f}ms"
            )


if __name__ == "__main__":
    main()
