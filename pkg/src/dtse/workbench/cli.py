"""Command-line workbench.

Machine-readable output (JSON or CSV) goes to stdout; progress and
diagnostics go to stderr. Exit codes: 0 success, 1 runtime failure,
2 usage errors (argparse's default).
"""

import argparse
import json
import sys
import time

import numpy as np

from .. import architecture as arch
from .. import metrics
from .. import streaming as strm
from .. import training
from ..kernels import BACKEND
from . import checkpoint_io, manifest, synth
from .wavio import WavFile, wav_read, wav_write

F32 = np.float32


def _log(msg):
    print(msg, file=sys.stderr)


def _emit_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_dataset(manifest_path, heldout_fraction, seed):
    records = manifest.load_manifest(manifest_path)
    items = []
    rate = None
    for rec in records:
        r, mix, tgt, enr = manifest.load_record_audio(manifest_path, rec)
        if rate is None:
            rate = r
        elif r != rate:
            raise ValueError(f"manifest mixes sample rates ({r} vs {rate})")
        items.append((mix, tgt, enr))
    ds = training.Dataset.split(items, heldout_fraction=heldout_fraction, seed=seed)
    return ds, rate


# ---------------------------------------------------------------------------
# subcommands


def cmd_mix(args):
    target = wav_read(args.target)
    interf = wav_read(args.interferer)
    if interf.sample_rate != target.sample_rate:
        raise ValueError("target and interferer sample rates differ")
    noise = None
    if args.noise:
        nf = wav_read(args.noise)
        if nf.sample_rate != target.sample_rate:
            raise ValueError("noise sample rate differs from target")
        noise = nf.samples
    mixture, gi, gn = synth.synthesize_mixture(
        target.samples, interf.samples, args.sir, args.snr, noise=noise, seed=args.seed
    )
    wav_write(args.out, WavFile(target.sample_rate, mixture), encoding=args.encoding)
    _emit_json({
        "out": args.out,
        "interferer_gain": gi,
        "noise_gain": gn,
        "sir_db": args.sir,
        "snr_db": args.snr,
        "samples": int(len(mixture)),
    })
    return 0


def _model_config(args):
    if args.config:
        with open(args.config) as fh:
            return arch.ModelConfig.from_json(fh.read())
    return arch.ModelConfig()


def cmd_train(args):
    tcfg = training.TrainConfig(
        mode=args.mode,
        iterations=args.iters,
        epochs_per_iteration=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        sample_delay=args.delay if args.delay else 16,
        seed=args.seed,
    )
    ds, rate = _load_dataset(args.manifest, args.heldout_fraction, args.seed)
    _log(f"loaded {len(ds.train)} train / {len(ds.heldout)} held-out items at {rate} Hz")

    if args.mode == "baseline":
        if args.init_ckpt:
            init = checkpoint_io.ckpt_load(args.init_ckpt)
            cfg = init.config
        else:
            init = None
            cfg = _model_config(args)
        if args.delay:
            cfg = cfg.with_delay(args.delay)
        tcfg.sample_delay = cfg.sample_delay
        tcfg.validate()
        ckpt, record = training.train_baseline(ds, cfg, tcfg, init=init)
    else:
        if not args.init_ckpt:
            raise ValueError(f"{args.mode} training needs --init-ckpt (a baseline checkpoint)")
        base = checkpoint_io.ckpt_load(args.init_ckpt)
        cfg = base.config
        if args.delay:
            cfg = cfg.with_delay(args.delay)
            base = arch.Checkpoint(cfg, base.entries)
        tcfg.sample_delay = cfg.sample_delay
        tcfg.validate()
        if args.mode == "dense-ar":
            ckpt, record = training.train_ar(ds, cfg, tcfg, base)
        else:
            ckpt, record = training.train_paris(ds, cfg, tcfg, base)

    checkpoint_io.ckpt_save(args.out_ckpt, ckpt)
    result = {
        "mode": args.mode,
        "out_ckpt": args.out_ckpt,
        "epoch_rows": len(record.rows),
        "final_loss": record.rows[-1][2],
        "heldout_si_sdri_db": record.rows[-1][3],
    }
    if args.record:
        record.to_csv(args.record)
        result["record"] = args.record
    _emit_json(result)
    return 0


def _load_ckpt_audio(args, need_enroll=True):
    ckpt = checkpoint_io.ckpt_load(args.ckpt)
    mix = wav_read(args.mixture)
    if mix.sample_rate != ckpt.config.sample_rate:
        raise ValueError(
            f"mixture rate {mix.sample_rate} != model rate {ckpt.config.sample_rate}"
        )
    enr = wav_read(args.enroll) if need_enroll else None
    if enr is not None and enr.sample_rate != mix.sample_rate:
        raise ValueError("enrollment sample rate differs from mixture")
    return ckpt, mix, enr


def cmd_extract(args):
    ckpt, mix, enr = _load_ckpt_audio(args)
    cfg = ckpt.config
    if args.mode == "static":
        if args.condition:
            raise ValueError("--condition only applies to dynamic mode")
        est = arch.forward(mix.samples, enr.samples, cfg, ckpt, mode="static").data
    elif args.condition:
        cond_wav = wav_read(args.condition)
        if cond_wav.sample_rate != mix.sample_rate:
            raise ValueError("condition sample rate differs from mixture")
        cond = training.make_ar_condition(
            cond_wav.samples, cfg.sample_delay, len(mix.samples)
        )
        est = arch.forward(mix.samples, enr.samples, cfg, ckpt,
                           condition=cond, mode="dynamic").data
    else:
        est, _ = strm.run_stream(mix.samples, enr.samples, cfg, ckpt, mode="dynamic")
    wav_write(args.out, WavFile(mix.sample_rate, est))
    _emit_json({
        "out": args.out,
        "mode": args.mode,
        "conditioning": "external" if args.condition else
                        ("enrollment-only" if args.mode == "static" else "self"),
        "samples": int(len(est)),
    })
    return 0


def cmd_stream(args):
    ckpt, mix, enr = _load_ckpt_audio(args)
    cfg = ckpt.config
    y = mix.samples
    t0 = time.perf_counter()
    est, state = strm.run_stream(y, enr.samples, cfg, ckpt, mode=args.mode,
                                 chunk=args.chunk)
    wall = time.perf_counter() - t0
    duration = len(y) / cfg.sample_rate
    report = {
        "hop_latency_ms": 1000.0 * cfg.stride / cfg.sample_rate,
        "window_latency_ms": 1000.0 * cfg.kernel / cfg.sample_rate,
        "rtf": wall / duration,
        "duration_s": duration,
        "wall_s": wall,
        "chunk": args.chunk,
        "frames": state.frames_processed,
        "mode": args.mode,
    }
    if args.out:
        wav_write(args.out, WavFile(cfg.sample_rate, est))
        report["out"] = args.out
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    _emit_json(report)
    return 0


def cmd_eval(args):
    if args.manifest:
        if not args.ckpt:
            raise ValueError("--manifest evaluation needs --ckpt")
        ckpt = checkpoint_io.ckpt_load(args.ckpt)
        cfg = ckpt.config
        records = manifest.load_manifest(args.manifest)
        results = []
        per_record = []
        for rec in records:
            rate, mix, tgt, enr = manifest.load_record_audio(args.manifest, rec)
            if rate != cfg.sample_rate:
                raise ValueError(f"record rate {rate} != model rate {cfg.sample_rate}")
            if args.mode == "static":
                est = arch.forward(mix, enr, cfg, ckpt, mode="static").data
            elif args.oracle_condition:
                cond = training.make_ar_condition(tgt, cfg.sample_delay, len(mix))
                est = arch.forward(mix, enr, cfg, ckpt, condition=cond, mode="dynamic").data
            else:
                est, _ = strm.run_stream(mix, enr, cfg, ckpt, mode="dynamic")
            n = len(est)
            res = metrics.evaluate(est, tgt[:n], mix[:n], rate)
            results.append(res)
            per_record.append({"mixture": rec.mixture, **res.to_dict()})
        _emit_json({
            "mode": args.mode,
            "conditioning": "oracle" if args.oracle_condition else "self",
            "per_record": per_record,
            "aggregate": metrics.aggregate(results),
        })
        return 0
    if not (args.est and args.ref and args.mix):
        raise ValueError("eval needs either --manifest or all of --est/--ref/--mix")
    est = wav_read(args.est)
    ref = wav_read(args.ref)
    mix = wav_read(args.mix)
    if not (est.sample_rate == ref.sample_rate == mix.sample_rate):
        raise ValueError("eval inputs have mismatched sample rates")
    res = metrics.evaluate(est.samples, ref.samples, mix.samples, ref.sample_rate)
    _emit_json(res.to_dict())
    return 0


def cmd_inspect(args):
    ckpt = checkpoint_io.ckpt_load(args.ckpt)
    tensors = []
    n_base = n_dyn = p_base = p_dyn = 0
    for name, t in ckpt.entries.items():
        dyn = arch.is_dynamic_param(name)
        if dyn:
            n_dyn += 1
            p_dyn += t.size
        else:
            n_base += 1
            p_base += t.size
        tensors.append({
            "name": name,
            "shape": list(t.shape),
            "trainable": t.trainable,
            "scope": "dynamic" if dyn else "baseline",
        })
    _emit_json({
        "format_version": checkpoint_io.VERSION,
        "config": json.loads(ckpt.config.to_json()),
        "tensor_count": len(tensors),
        "parameters": {"baseline": p_base, "dynamic": p_dyn, "total": p_base + p_dyn},
        "tensors_by_scope": {"baseline": n_base, "dynamic": n_dyn},
        "tensors": tensors,
    })
    return 0


def cmd_bench(args):
    from ..kernels import bench as kbench

    _log(f"active backend: {BACKEND}")
    results = kbench.run(repeats=args.repeats, frames=args.frames)
    _log(kbench.format_table(results))
    out = {"active_backend": BACKEND, "kernels": results}
    if not args.skip_stream:
        cfg = arch.ModelConfig()
        ckpt = arch.init_checkpoint(cfg, seed=0)
        _log("measuring streaming real-time factor (dynamic self-feedback)...")
        report = strm.measure(cfg, ckpt, duration_s=args.duration)
        out["stream"] = report.to_dict()
    _emit_json(out)
    return 0


def cmd_ablate_delay(args):
    delays = [int(d) for d in args.delays.split(",") if d]
    if not delays:
        raise ValueError("--delays needs a non-empty comma-separated list")
    base = checkpoint_io.ckpt_load(args.ckpt)
    ds, rate = _load_dataset(args.manifest, args.heldout_fraction, args.seed)
    if rate != base.config.sample_rate:
        raise ValueError(f"manifest rate {rate} != model rate {base.config.sample_rate}")
    rows = []
    for d in delays:
        cfg = base.config.with_delay(d)
        ckpt_d = arch.Checkpoint(cfg, {n: t.copy() for n, t in base.entries.items()})
        tcfg = training.TrainConfig(
            mode=args.schedule,
            iterations=args.iters,
            epochs_per_iteration=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            sample_delay=d,
            seed=args.seed,
        ).validate()
        _log(f"delay {d}: training {args.schedule} ...")
        if args.schedule == "dense-ar":
            trained, _ = training.train_ar(ds, cfg, tcfg, ckpt_d)
        else:
            trained, _ = training.train_paris(ds, cfg, tcfg, ckpt_d)
        si = training.eval_si_sdri(ds.heldout, cfg, trained, mode="dynamic")
        _log(f"delay {d}: held-out SI-SDRi {si:.3f} dB")
        rows.append((d, si))
    lines = ["delay,si_sdri"] + [f"{d},{si!r}" for d, si in rows]
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_dump_emb(args):
    ckpt, mix, enr = _load_ckpt_audio(args)
    cfg = ckpt.config
    if args.condition:
        cond_wav = wav_read(args.condition)
        if cond_wav.sample_rate != mix.sample_rate:
            raise ValueError("condition sample rate differs from mixture")
        cond = training.make_ar_condition(
            cond_wav.samples, cfg.sample_delay, len(mix.samples)
        )
    else:
        _log("no --condition given; conditioning on self-feedback output")
        out, _ = strm.run_stream(mix.samples, enr.samples, cfg, ckpt, mode="dynamic")
        cond = training.make_ar_condition(out, cfg.sample_delay, len(mix.samples))
    E = arch.dump_embeddings(mix.samples, enr.samples, cfg, ckpt, cond, args.out)
    _emit_json({"out": args.out, "frames": E.frames, "dim": E.dim})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(
        prog="dtse",
        description="Streaming causal target-speech extraction workbench",
    )
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("mix", help="synthesize a mixture at given SIR/SNR")
    q.add_argument("--target", required=True)
    q.add_argument("--interferer", required=True)
    q.add_argument("--noise")
    q.add_argument("--sir", type=float, default=0.0, help="signal-to-interference, dB")
    q.add_argument("--snr", type=float, default=float("inf"),
                   help="signal-to-noise, dB (default: no noise)")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--encoding", choices=["float32", "pcm16"], default="float32")
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_mix)

    q = sub.add_parser("train", help="train one of the three schedules")
    q.add_argument("--manifest", required=True)
    q.add_argument("--mode", choices=list(training.TRAIN_MODES), default="baseline")
    q.add_argument("--init-ckpt", help="starting checkpoint (required for dense modes)")
    q.add_argument("--config", help="model config JSON (fresh baseline only)")
    q.add_argument("--iters", type=int, default=3)
    q.add_argument("--epochs", type=int, default=50)
    q.add_argument("--batch-size", type=int, default=8)
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--delay", type=int, default=0,
                   help="feedback delay in samples (default: model config)")
    q.add_argument("--heldout-fraction", type=float, default=0.1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--record", help="write per-epoch CSV here")
    q.add_argument("--out-ckpt", required=True)
    q.set_defaults(fn=cmd_train)

    q = sub.add_parser("extract", help="run extraction on one mixture")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--mixture", required=True)
    q.add_argument("--enroll", required=True)
    q.add_argument("--mode", choices=list(arch.MODES), default="dynamic")
    q.add_argument("--condition", help="external condition WAV (dynamic mode)")
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_extract)

    q = sub.add_parser("stream", help="chunked streaming run with latency report")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--mixture", required=True)
    q.add_argument("--enroll", required=True)
    q.add_argument("--chunk", type=int, default=8, help="chunk size in samples")
    q.add_argument("--mode", choices=list(arch.MODES), default="dynamic")
    q.add_argument("--out", help="write the streamed output WAV here")
    q.add_argument("--report", help="also write the latency JSON here")
    q.set_defaults(fn=cmd_stream)

    q = sub.add_parser("eval", help="score an estimate or a whole manifest")
    q.add_argument("--est")
    q.add_argument("--ref")
    q.add_argument("--mix")
    q.add_argument("--manifest")
    q.add_argument("--ckpt", help="checkpoint for manifest evaluation")
    q.add_argument("--mode", choices=list(arch.MODES), default="dynamic")
    q.add_argument("--oracle-condition", action="store_true",
                   help="condition on the delayed clean target instead of self-feedback")
    q.set_defaults(fn=cmd_eval)

    q = sub.add_parser("inspect", help="summarize a checkpoint as JSON")
    q.add_argument("--ckpt", required=True)
    q.set_defaults(fn=cmd_inspect)

    q = sub.add_parser("bench", help="compare kernel backends, measure streaming RTF")
    q.add_argument("--repeats", type=int, default=5)
    q.add_argument("--frames", type=int, default=999)
    q.add_argument("--duration", type=float, default=3.0)
    q.add_argument("--skip-stream", action="store_true")
    q.set_defaults(fn=cmd_bench)

    q = sub.add_parser("ablate-delay", help="train and score across feedback delays")
    q.add_argument("--manifest", required=True)
    q.add_argument("--ckpt", required=True, help="baseline checkpoint")
    q.add_argument("--delays", required=True, help="comma-separated delays in samples")
    q.add_argument("--schedule", choices=["dense-ar", "dense-paris"],
                   default="dense-paris")
    q.add_argument("--iters", type=int, default=1)
    q.add_argument("--epochs", type=int, default=4)
    q.add_argument("--batch-size", type=int, default=8)
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--heldout-fraction", type=float, default=0.1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="also write the CSV here")
    q.set_defaults(fn=cmd_ablate_delay)

    q = sub.add_parser("dump-emb", help="write static and per-frame embeddings as CSV")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--mixture", required=True)
    q.add_argument("--enroll", required=True)
    q.add_argument("--condition", help="external condition WAV (default: self-feedback)")
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_dump_emb)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as e:  # runtime failures exit 1 with a message
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
