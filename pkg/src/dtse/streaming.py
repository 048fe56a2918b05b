"""Frame-by-frame inference.

The engine consumes arbitrary chunk sizes and reproduces the offline
forward pass: every complete analysis window of `kernel` samples advances
one frame and emits `stride` samples; flush drains the kernel-stride
overlap tail. Per-layer state is a set of fixed-size rings (depthwise
conv history, feedback delay line, overlap-add tail) plus running
cumulative-norm statistics, all allocated once at init.

In dynamic mode the condition waveform for frame t is the engine's own
emitted output read back `sample_delay` samples in the past (or an
externally supplied stream, delayed the same way). Because sample_delay
>= kernel, those reads only ever touch samples finalized strictly before
the frame's own window, which is what makes self-feedback causal.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import architecture as arch
from . import numerics as nm

F32 = np.float32
F64 = np.float64


class StreamError(RuntimeError):
    pass


class _SampleRing:
    """1-D ring indexed by absolute sample position; reads before the
    start of time return zero."""

    __slots__ = ("data", "size", "hi")

    def __init__(self, size):
        self.size = int(size)
        self.data = np.zeros(self.size, F32)
        self.hi = 0  # absolute position one past the newest stored sample

    def write(self, start, arr):
        n = len(arr)
        if n == 0:
            return
        i0 = start % self.size
        first = min(n, self.size - i0)
        self.data[i0 : i0 + first] = arr[:first]
        if first < n:
            self.data[: n - first] = arr[first:]
        self.hi = start + n

    def read(self, start, count):
        out = np.zeros(count, F32)
        lo = max(start, 0)
        if lo < start + count:
            idx = (np.arange(lo, start + count)) % self.size
            out[lo - start :] = self.data[idx]
        return out


class _ClnState:
    """Running cumulative layer norm over (channels x frames seen)."""

    __slots__ = ("g64", "b64", "eps", "count", "s1", "s2", "channels")

    def __init__(self, g, b, eps=nm.EPS):
        self.g64 = g.astype(F64)
        self.b64 = b.astype(F64)
        self.eps = eps
        self.channels = len(g)
        self.count = 0
        self.s1 = 0.0
        self.s2 = 0.0

    def step(self, col):
        c64 = col.astype(F64)
        self.s1 += c64.sum()
        self.s2 += (c64 * c64).sum()
        self.count += self.channels
        mu = self.s1 / self.count
        var = self.s2 / self.count - mu * mu
        if var < 0.0:
            var = 0.0
        s = np.sqrt(var + self.eps)
        return (self.g64 * (c64 - mu) / s + self.b64).astype(F32)


class _DwState:
    """Depthwise dilated conv over a ring of past activation columns."""

    __slots__ = ("w64", "b64", "ring", "span", "pos", "K", "dilation")

    def __init__(self, w, b, dilation):
        C, K = w.shape
        self.w64 = w.astype(F64)
        self.b64 = b.astype(F64)
        self.K = K
        self.dilation = dilation
        self.span = (K - 1) * dilation + 1
        self.ring = np.zeros((C, self.span), F32)
        self.pos = 0

    def step(self, col):
        self.ring[:, self.pos] = col
        acc = self.b64.copy()
        for k in range(self.K):
            idx = (self.pos - (self.K - 1 - k) * self.dilation) % self.span
            acc += self.w64[:, k] * self.ring[:, idx]
        self.pos = (self.pos + 1) % self.span
        return acc.astype(F32)


def _prelu(col, alpha):
    return np.where(col < 0, alpha * col, col)


class _BlockState:
    """One TCN block: 1x1 in, PReLU, cLN, depthwise, PReLU, cLN, 1x1 out,
    residual."""

    __slots__ = ("in_w", "in_b", "in_alpha", "cln1", "dw", "dw_alpha", "cln2",
                 "out_w", "out_b")

    def __init__(self, ckpt, prefix, dilation):
        g = ckpt.get
        self.in_w = g(prefix + "in.w").data[:, :, 0].astype(F64)
        self.in_b = g(prefix + "in.b").data.astype(F64)
        self.in_alpha = g(prefix + "in.alpha").data.copy()
        self.cln1 = _ClnState(g(prefix + "norm1.g").data, g(prefix + "norm1.b").data)
        self.dw = _DwState(g(prefix + "dw.w").data, g(prefix + "dw.b").data, dilation)
        self.dw_alpha = g(prefix + "dw.alpha").data.copy()
        self.cln2 = _ClnState(g(prefix + "norm2.g").data, g(prefix + "norm2.b").data)
        self.out_w = g(prefix + "out.w").data[:, :, 0].astype(F64)
        self.out_b = g(prefix + "out.b").data.astype(F64)

    def step(self, x):
        h = (self.in_w @ x.astype(F64) + self.in_b).astype(F32)
        h = _prelu(h, self.in_alpha)
        h = self.cln1.step(h)
        h = self.dw.step(h)
        h = _prelu(h, self.dw_alpha)
        h = self.cln2.step(h)
        h = (self.out_w @ h.astype(F64) + self.out_b).astype(F32)
        return x + h


class _BranchState:
    """Encoder front end plus a TCN stack ending in a 1x1 head; used for
    both the separator trunk and the speech branch."""

    def __init__(self, ckpt, enc_name, proj_prefix, block_prefix, n_blocks,
                 head_prefix):
        self.enc_w = ckpt.get(enc_name).data[:, 0, :].astype(F64)
        if proj_prefix is None:
            self.proj_w = None
        else:
            self.proj_w = ckpt.get(proj_prefix + "w").data[:, :, 0].astype(F64)
            self.proj_b = ckpt.get(proj_prefix + "b").data.astype(F64)
        self.blocks = [
            _BlockState(ckpt, f"{block_prefix}{i}.", 2 ** i) for i in range(n_blocks)
        ]
        if head_prefix is None:
            self.head_w = None
        else:
            self.head_w = ckpt.get(head_prefix + "w").data[:, :, 0].astype(F64)
            self.head_b = ckpt.get(head_prefix + "b").data.astype(F64)

    def encode(self, window):
        y = self.enc_w @ window.astype(F64)
        return np.maximum(y.astype(F32), 0)

    def run(self, window):
        x = self.encode(window)
        x = (self.proj_w @ x.astype(F64) + self.proj_b).astype(F32)
        for blk in self.blocks:
            x = blk.step(x)
        return (self.head_w @ x.astype(F64) + self.head_b).astype(F32)


@dataclass
class LatencyReport:
    hop_latency_ms: float
    window_latency_ms: float
    rtf: float
    duration_s: float
    wall_s: float

    def to_dict(self):
        return {
            "hop_latency_ms": self.hop_latency_ms,
            "window_latency_ms": self.window_latency_ms,
            "rtf": self.rtf,
            "duration_s": self.duration_s,
            "wall_s": self.wall_s,
        }


class StreamState:
    """All mutable state of one streaming session. Built by stream_init;
    advanced by stream_push; drained by stream_flush."""

    def __init__(self, cfg, mode, condition_source, track_reads):
        self.cfg = cfg
        self.mode = mode
        self.condition_source = condition_source
        self.track_reads = track_reads
        self.read_log = [] if track_reads else None
        self.frames_processed = 0
        self.samples_in = 0
        self.samples_emitted = 0
        self.flushed = False
        # populated by stream_init:
        self.static_embed = None     # e_c as float32 (N,)
        self.conv_caches = {}        # prefix -> _DwState (shared refs)
        self.cln_stats = {}          # name -> _ClnState (shared refs)
        self.delay_ring = None       # _SampleRing of condition samples
        self.ola_buffer = None       # float64 overlap-add ring
        self.in_ring = None


def _register_rings(state, prefix, branch):
    for i, blk in enumerate(branch.blocks):
        state.conv_caches[f"{prefix}{i}.dw"] = blk.dw
        state.cln_stats[f"{prefix}{i}.norm1"] = blk.cln1
        state.cln_stats[f"{prefix}{i}.norm2"] = blk.cln2


def stream_init(cfg, ckpt, enrollment, mode="dynamic", condition_source="self",
                track_reads=False):
    """Prepare a session: embed the enrollment, size every ring, zero all
    state. `condition_source` is "self" (feed back own output) or
    "external" (caller supplies the condition stream to stream_push)."""
    if mode not in arch.MODES:
        raise ValueError(f"mode must be one of {arch.MODES}, got {mode!r}")
    if condition_source not in ("self", "external"):
        raise ValueError(f"condition_source must be 'self' or 'external', got {condition_source!r}")
    cfg.validate()
    ckpt.validate_against_config()
    enr = np.asarray(enrollment, F32).ravel()
    if len(enr) < cfg.kernel:
        raise ValueError(f"enrollment length {len(enr)} shorter than kernel {cfg.kernel}")

    if mode == "static":
        condition_source = "self"
    st = StreamState(cfg, mode, condition_source, track_reads)
    e_c = arch.auxiliary_embed(enr, cfg, ckpt)
    st.static_embed = e_c.data.copy()

    K, S = cfg.kernel, cfg.stride
    st.in_ring = _SampleRing(2 * (K + S))
    st.ola_buffer = np.zeros(2 * K, F64)

    g = ckpt.get
    st._sep_norm = _ClnState(g("sep.norm.g").data, g("sep.norm.b").data)
    st.cln_stats["sep.norm"] = st._sep_norm
    st._sep = _BranchState(ckpt, "enc.w", "sep.in.", "sep", 0, None)
    st._sep_blocks = []
    for r in range(cfg.repeats):
        for b in range(cfg.blocks_per_repeat):
            blk = _BlockState(ckpt, f"sep.r{r}.b{b}.", 2 ** b)
            st._sep_blocks.append(blk)
            st.conv_caches[f"sep.r{r}.b{b}.dw"] = blk.dw
            st.cln_stats[f"sep.r{r}.b{b}.norm1"] = blk.cln1
            st.cln_stats[f"sep.r{r}.b{b}.norm2"] = blk.cln2
    st._adapt_at = cfg.adaptation_block_index
    st._mask_w = g("sep.mask.w").data[:, :, 0].astype(F64)
    st._mask_b = g("sep.mask.b").data.astype(F64)
    st._dec_w = g("dec.w").data[:, 0, :].astype(F64)

    if mode == "static":
        v = arch._project_embedding(e_c, cfg, ckpt, dynamic=False)
        st._static_gain = v.data.copy()
        st.delay_ring = None
    else:
        st._spk = _BranchState(ckpt, "spk.enc.w", "spk.proj.",
                               "spk.block", cfg.speech_branch_blocks, "spk.head.")
        _register_rings(st, "spk.block", st._spk)
        st._fuse_w = g("fuse.w").data[:, :, 0].astype(F64)
        st._fuse_b = g("fuse.b").data.astype(F64)
        st._fuse_alpha = g("fuse.alpha").data.copy()
        if cfg.embed_dim != cfg.bottleneck_channels:
            st._dynp_w = g("adapt.dyn_proj.w").data[:, :, 0].astype(F64)
            st._dynp_b = g("adapt.dyn_proj.b").data.astype(F64)
        else:
            st._dynp_w = None
        st.delay_ring = _SampleRing(cfg.sample_delay + 2 * K)
    return st


def _frame_condition(st, frame_start):
    """Condition window for the frame starting at frame_start: the ring
    contents at [frame_start - delay, frame_start - delay + K)."""
    cfg = st.cfg
    lo = frame_start - cfg.sample_delay
    win = st.delay_ring.read(lo, cfg.kernel)
    if st.track_reads:
        st.read_log.append(
            (st.frames_processed, lo, lo + cfg.kernel - 1, frame_start)
        )
    return win


def _process_frame(st):
    cfg = st.cfg
    K, S = cfg.kernel, cfg.stride
    t = st.frames_processed
    start = t * S
    window = st.in_ring.read(start, K)

    Y = st._sep.encode(window)
    x = st._sep_norm.step(Y)
    x = (st._sep.proj_w @ x.astype(F64) + st._sep.proj_b).astype(F32)

    if st.mode == "dynamic":
        cond = _frame_condition(st, start)
        es = st._spk.run(cond)
        cat = np.concatenate([st.static_embed, es]).astype(F64)
        h = (st._fuse_w @ cat + st._fuse_b).astype(F32)
        h = _prelu(h, st._fuse_alpha)
        E_t = st.static_embed + h
        if st._dynp_w is not None:
            gain = (st._dynp_w @ E_t.astype(F64) + st._dynp_b).astype(F32)
        else:
            gain = E_t
    else:
        gain = st._static_gain

    for i, blk in enumerate(st._sep_blocks, start=1):
        x = blk.step(x)
        if i == st._adapt_at:
            x = x * gain

    m = st._mask_w @ x.astype(F64) + st._mask_b
    mask = (1.0 / (1.0 + np.exp(-m))).astype(F32)
    masked = Y * mask

    contrib = masked.astype(F64) @ st._dec_w        # (K,)
    # overlap-add into the ring, then emit the S samples that are final
    pos = np.arange(start, start + K) % len(st.ola_buffer)
    st.ola_buffer[pos] += contrib
    emit_pos = pos[:S]
    out = st.ola_buffer[emit_pos].astype(F32)
    st.ola_buffer[emit_pos] = 0.0
    if st.mode == "dynamic" and st.condition_source == "self":
        st.delay_ring.write(start, out)
    st.frames_processed += 1
    st.samples_emitted += S
    return out


def stream_push(st, samples, condition=None):
    """Feed a chunk of mixture samples; returns the samples that became
    final. In external-condition mode `condition` must accompany every
    chunk with the same length."""
    if st.flushed:
        raise StreamError("stream_push called after stream_flush")
    samples = np.asarray(samples, F32).ravel()
    if st.mode == "dynamic" and st.condition_source == "external":
        if condition is None:
            raise StreamError("external condition mode needs a condition chunk")
        condition = np.asarray(condition, F32).ravel()
        if len(condition) != len(samples):
            raise StreamError(
                f"condition chunk length {len(condition)} != sample chunk {len(samples)}"
            )
    elif condition is not None:
        raise StreamError("condition chunk only valid in dynamic external mode")

    cfg = st.cfg
    K, S = cfg.kernel, cfg.stride
    outs = []
    i = 0
    n = len(samples)
    while i < n:
        next_end = st.frames_processed * S + K
        take = min(n - i, max(next_end - st.samples_in, 0))
        if take == 0:
            # ring already holds a full window; process before buffering more
            outs.append(_process_frame(st))
            continue
        st.in_ring.write(st.samples_in, samples[i : i + take])
        if st.mode == "dynamic" and st.condition_source == "external":
            st.delay_ring.write(st.samples_in, condition[i : i + take])
        st.samples_in += take
        i += take
        if st.samples_in == next_end:
            outs.append(_process_frame(st))
    if not outs:
        return np.zeros(0, F32)
    return np.concatenate(outs)


def stream_flush(st):
    """Emit the overlap tail (kernel - stride samples) and end the session."""
    if st.flushed:
        raise StreamError("stream_flush called twice")
    if st.frames_processed == 0:
        raise StreamError("no complete frame was ever pushed")
    st.flushed = True
    cfg = st.cfg
    K, S = cfg.kernel, cfg.stride
    start = (st.frames_processed - 1) * S + S
    count = K - S
    pos = np.arange(start, start + count) % len(st.ola_buffer)
    out = st.ola_buffer[pos].astype(F32)
    st.ola_buffer[pos] = 0.0
    st.samples_emitted += count
    return out


def run_stream(y, enrollment, cfg, ckpt, mode="dynamic", condition=None,
               chunk=None, track_reads=False):
    """Convenience wrapper: stream a whole waveform and return the output
    (and the state, for inspecting instrumentation).

    condition=None with dynamic mode means self-feedback; an array means
    external conditioning (the engine applies the delay itself).
    """
    y = np.asarray(y, F32).ravel()
    source = "self"
    if condition is not None:
        source = "external"
        condition = np.asarray(condition, F32).ravel()
        if len(condition) != len(y):
            raise ValueError("condition must have the same length as the mixture")
    st = stream_init(cfg, ckpt, enrollment, mode=mode,
                     condition_source=source if mode == "dynamic" else "self",
                     track_reads=track_reads)
    if chunk is None:
        chunk = max(1, len(y))
    outs = []
    for i in range(0, len(y), chunk):
        blk = y[i : i + chunk]
        if mode == "dynamic" and source == "external":
            outs.append(stream_push(st, blk, condition[i : i + chunk]))
        else:
            outs.append(stream_push(st, blk))
    outs.append(stream_flush(st))
    return np.concatenate(outs), st


def measure(cfg, ckpt, duration_s=3.0, seed=0, mode="dynamic"):
    """Wall-clock the engine on synthetic audio pushed hop by hop."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = int(duration_s * cfg.sample_rate)
    y = rng.standard_normal(n).astype(F32) * 0.1
    enr = rng.standard_normal(cfg.sample_rate).astype(F32) * 0.1
    st = stream_init(cfg, ckpt, enr, mode=mode, condition_source="self")
    S = cfg.stride
    t0 = time.perf_counter()
    for i in range(0, n, S):
        stream_push(st, y[i : i + S])
    stream_flush(st)
    wall = time.perf_counter() - t0
    return LatencyReport(
        hop_latency_ms=1000.0 * cfg.stride / cfg.sample_rate,
        window_latency_ms=1000.0 * cfg.kernel / cfg.sample_rate,
        rtf=wall / duration_s,
        duration_s=duration_s,
        wall_s=wall,
    )
