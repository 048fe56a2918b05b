"""Model configuration, parameter store, and the forward graph.

The extractor is a causal masking network: a strided conv encoder, a TCN
separator whose activations are modulated by a speaker embedding, a
sigmoid mask, and a transposed-conv decoder. Two conditioning modes:

  static   the enrollment embedding alone modulates the separator
  dynamic  a speech branch embeds a delayed feedback waveform per frame
           and a fusion layer corrects the enrollment embedding with it

Parameter scopes: names starting with "spk." or "fuse." (plus
"adapt.dyn_proj." when the embedding needs projection) belong to the
dynamic extension; everything else is the static baseline.
"""

import json
from contextlib import contextmanager
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import numerics as nm
from .numerics import Tensor

F32 = np.float32

DYNAMIC_PREFIXES = ("spk.", "fuse.", "adapt.dyn_proj.")

MODES = ("static", "dynamic")


@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = 8000
    kernel: int = 16            # encoder/decoder kernel, samples
    stride: int = 8             # encoder/decoder hop, samples
    enc_channels: int = 64
    bottleneck_channels: int = 32
    hidden_channels: int = 64
    tcn_kernel: int = 3
    blocks_per_repeat: int = 4
    repeats: int = 2
    embed_dim: int = 32
    adaptation_block_index: int = 7   # 1-based count over all TCN blocks
    sample_delay: int = 16            # feedback delay, samples
    speech_branch_blocks: int = 2
    aux_blocks: int = 2
    causal: bool = True

    def validate(self):
        for f in ("sample_rate", "kernel", "stride", "enc_channels",
                  "bottleneck_channels", "hidden_channels", "tcn_kernel",
                  "blocks_per_repeat", "repeats", "embed_dim",
                  "speech_branch_blocks", "aux_blocks"):
            if getattr(self, f) < 1:
                raise ValueError(f"ModelConfig.{f} must be >= 1")
        if self.stride > self.kernel:
            raise ValueError("stride must not exceed kernel")
        total = self.blocks_per_repeat * self.repeats
        if not 1 <= self.adaptation_block_index <= total:
            raise ValueError(
                f"adaptation_block_index {self.adaptation_block_index} outside 1..{total}"
            )
        if self.sample_delay < self.kernel:
            # the feedback read for frame t must stay left of the samples
            # frame t itself produces; one full kernel of delay guarantees it
            raise ValueError(
                f"sample_delay {self.sample_delay} < kernel {self.kernel}"
            )
        if not self.causal:
            raise ValueError("only the causal configuration is implemented")
        return self

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw).validate()

    def frames_for(self, n_samples):
        if n_samples < self.kernel:
            raise ValueError(
                f"signal length {n_samples} shorter than kernel {self.kernel}"
            )
        return (n_samples - self.kernel) // self.stride + 1

    def with_delay(self, sample_delay):
        return replace(self, sample_delay=sample_delay).validate()


def _tcn_block_shapes(prefix, cin, hidden, P):
    return [
        (prefix + "in.w", (hidden, cin, 1)),
        (prefix + "in.b", (hidden,)),
        (prefix + "in.alpha", (hidden,)),
        (prefix + "norm1.g", (hidden,)),
        (prefix + "norm1.b", (hidden,)),
        (prefix + "dw.w", (hidden, P)),
        (prefix + "dw.b", (hidden,)),
        (prefix + "dw.alpha", (hidden,)),
        (prefix + "norm2.g", (hidden,)),
        (prefix + "norm2.b", (hidden,)),
        (prefix + "out.w", (cin, hidden, 1)),
        (prefix + "out.b", (cin,)),
    ]


def parameter_spec(cfg: ModelConfig):
    """Ordered (name, shape) list for every tensor the config implies."""
    K, P = cfg.kernel, cfg.tcn_kernel
    E, B, H, N = cfg.enc_channels, cfg.bottleneck_channels, cfg.hidden_channels, cfg.embed_dim
    out = [("enc.w", (E, 1, K))]
    out += [("aux.enc.w", (E, 1, K)), ("aux.proj.w", (B, E, 1)), ("aux.proj.b", (B,))]
    for i in range(cfg.aux_blocks):
        out += _tcn_block_shapes(f"aux.block{i}.", B, H, P)
    out += [("aux.head.w", (N, B, 1)), ("aux.head.b", (N,))]
    out += [("sep.norm.g", (E,)), ("sep.norm.b", (E,)),
            ("sep.in.w", (B, E, 1)), ("sep.in.b", (B,))]
    for r in range(cfg.repeats):
        for x in range(cfg.blocks_per_repeat):
            out += _tcn_block_shapes(f"sep.r{r}.b{x}.", B, H, P)
    out += [("sep.mask.w", (E, B, 1)), ("sep.mask.b", (E,))]
    if N != B:
        out += [("adapt.proj.w", (B, N, 1)), ("adapt.proj.b", (B,)),
                ("adapt.dyn_proj.w", (B, N, 1)), ("adapt.dyn_proj.b", (B,))]
    out += [("dec.w", (E, 1, K))]
    out += [("spk.enc.w", (E, 1, K)), ("spk.proj.w", (B, E, 1)), ("spk.proj.b", (B,))]
    for i in range(cfg.speech_branch_blocks):
        out += _tcn_block_shapes(f"spk.block{i}.", B, H, P)
    out += [("spk.head.w", (N, B, 1)), ("spk.head.b", (N,))]
    out += [("fuse.w", (N, 2 * N, 1)), ("fuse.b", (N,)), ("fuse.alpha", (N,))]
    return out


def is_dynamic_param(name):
    return name.startswith(DYNAMIC_PREFIXES)


class Checkpoint:
    """Named parameter store plus the config that shaped it.

    get() hands out the live Tensor objects, so optimizer updates are
    visible to every later forward pass. track_access() records which
    names a computation touched; the mode-gating tests use it to prove
    static inference never reads the dynamic extension.
    """

    format_version = 1

    def __init__(self, config: ModelConfig, entries=None):
        self.config = config.validate()
        self.entries: dict[str, Tensor] = entries if entries is not None else {}
        self._access_log = None

    def get(self, name) -> Tensor:
        try:
            t = self.entries[name]
        except KeyError:
            raise KeyError(f"checkpoint has no tensor {name!r}") from None
        if self._access_log is not None:
            self._access_log.add(name)
        return t

    def names(self):
        return list(self.entries)

    @contextmanager
    def track_access(self):
        prev = self._access_log
        self._access_log = set()
        try:
            yield self._access_log
        finally:
            self._access_log = prev

    def set_trainable(self, predicate, value):
        for name, t in self.entries.items():
            if predicate(name):
                t.trainable = bool(value)

    def freeze_baseline(self):
        """Dense-mode contract: only the dynamic extension trains."""
        self.set_trainable(lambda n: not is_dynamic_param(n), False)
        self.set_trainable(is_dynamic_param, True)

    def copy(self):
        return Checkpoint(self.config, {n: t.copy() for n, t in self.entries.items()})

    def validate_against_config(self):
        expected = dict(parameter_spec(self.config))
        for name, shape in expected.items():
            if name not in self.entries:
                raise ValueError(f"checkpoint is missing tensor {name!r}")
            got = self.entries[name].shape
            if got != shape:
                raise ValueError(f"tensor {name!r} has shape {got}, expected {shape}")
        extra = set(self.entries) - set(expected)
        if extra:
            raise ValueError(f"checkpoint has unexpected tensors: {sorted(extra)}")
        return self


def init_checkpoint(cfg: ModelConfig, seed=0) -> Checkpoint:
    """Fresh parameters: scaled-normal conv weights, unit norms, 0.25 slopes."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    ck = Checkpoint(cfg)
    for name, shape in parameter_spec(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "w":
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) / np.sqrt(fan_in)
        elif leaf == "alpha":
            data = np.full(shape, 0.25)
        elif leaf == "g":
            data = np.ones(shape)
        else:  # b of convs and norms
            data = np.zeros(shape)
        ck.entries[name] = Tensor(data.astype(F32), name=name, trainable=True)
    if "adapt.dyn_proj.w" in ck.entries:
        # the dynamic projection starts as a copy of the static one so a
        # zeroed fusion layer reproduces the baseline exactly
        ck.entries["adapt.dyn_proj.w"].data[:] = ck.entries["adapt.proj.w"].data
        ck.entries["adapt.dyn_proj.b"].data[:] = ck.entries["adapt.proj.b"].data
    return ck


@dataclass
class EmbeddingSequence:
    """Per-frame embeddings, one row per encoder frame."""

    frames: int
    dim: int
    values: Tensor  # (frames, dim)

    def __post_init__(self):
        if self.values.shape != (self.frames, self.dim):
            raise ValueError(
                f"embedding values shape {self.values.shape} != ({self.frames}, {self.dim})"
            )
        if not np.all(np.isfinite(self.values.data)):
            raise ValueError("embedding sequence contains non-finite values")


# ---------------------------------------------------------------------------
# forward graph pieces


def _as_wave2d(y, K, what):
    t = y if isinstance(y, Tensor) else Tensor(y)
    if t.data.ndim == 1:
        t = nm.reshape(t, (1, t.data.shape[0]))
    if t.data.ndim != 2 or t.data.shape[0] != 1:
        raise ValueError(f"{what} must be a mono waveform, got shape {t.shape}")
    if t.data.shape[1] < K:
        raise ValueError(f"{what} length {t.data.shape[1]} shorter than kernel {K}")
    return t


def encode(y, cfg, ckpt):
    """Waveform -> non-negative frame representation (enc_channels, T)."""
    y2 = _as_wave2d(y, cfg.kernel, "mixture")
    return nm.relu(nm.conv1d_causal(y2, ckpt.get("enc.w"), stride=cfg.stride))


def _tcn_stack(x, prefix, n_blocks, cfg, ckpt):
    for i in range(n_blocks):
        x = _tcn_block(x, f"{prefix}{i}.", 2 ** i, cfg, ckpt)
    return x


def _tcn_block(x, prefix, dilation, cfg, ckpt):
    g = ckpt.get
    h = nm.conv1d_causal(x, g(prefix + "in.w"), g(prefix + "in.b"))
    h = nm.prelu(h, g(prefix + "in.alpha"))
    h = nm.cumulative_layer_norm(h, g(prefix + "norm1.g"), g(prefix + "norm1.b"))
    h = nm.depthwise_conv1d_causal(h, g(prefix + "dw.w"), g(prefix + "dw.b"), dilation)
    h = nm.prelu(h, g(prefix + "dw.alpha"))
    h = nm.cumulative_layer_norm(h, g(prefix + "norm2.g"), g(prefix + "norm2.b"))
    h = nm.conv1d_causal(h, g(prefix + "out.w"), g(prefix + "out.b"))
    return nm.add(x, h)


def auxiliary_embed(c, cfg, ckpt):
    """Enrollment waveform -> time-invariant speaker embedding (N,)."""
    c2 = _as_wave2d(c, cfg.kernel, "enrollment")
    x = nm.relu(nm.conv1d_causal(c2, ckpt.get("aux.enc.w"), stride=cfg.stride))
    x = nm.conv1d_causal(x, ckpt.get("aux.proj.w"), ckpt.get("aux.proj.b"))
    x = _tcn_stack(x, "aux.block", cfg.aux_blocks, cfg, ckpt)
    x = nm.conv1d_causal(x, ckpt.get("aux.head.w"), ckpt.get("aux.head.b"))
    return nm.mean_frames(x)


def speech_branch(x_delayed, cfg, ckpt):
    """Delayed feedback waveform -> per-frame embeddings (T, N)."""
    x2 = _as_wave2d(x_delayed, cfg.kernel, "feedback waveform")
    x = nm.relu(nm.conv1d_causal(x2, ckpt.get("spk.enc.w"), stride=cfg.stride))
    x = nm.conv1d_causal(x, ckpt.get("spk.proj.w"), ckpt.get("spk.proj.b"))
    x = _tcn_stack(x, "spk.block", cfg.speech_branch_blocks, cfg, ckpt)
    x = nm.conv1d_causal(x, ckpt.get("spk.head.w"), ckpt.get("spk.head.b"))
    vals = nm.transpose2d(x)
    return EmbeddingSequence(vals.shape[0], vals.shape[1], vals)


def fuse_embeddings(e_c, e_s: EmbeddingSequence, cfg, ckpt):
    """Per-frame corrected embedding: E[t] = e_c + f(concat(e_c, e_s[t])).

    The residual form means a zeroed fusion layer leaves e_c untouched.
    """
    if e_c.data.shape != (cfg.embed_dim,):
        raise ValueError(f"static embedding shape {e_c.shape} != ({cfg.embed_dim},)")
    if e_s.dim != cfg.embed_dim:
        raise ValueError(f"frame embedding dim {e_s.dim} != {cfg.embed_dim}")
    T = e_s.frames
    ec_rep = nm.repeat_frames(e_c, T)                       # (N, T)
    cat = nm.concat_channels(ec_rep, nm.transpose2d(e_s.values))
    h = nm.conv1d_causal(cat, ckpt.get("fuse.w"), ckpt.get("fuse.b"))
    h = nm.prelu(h, ckpt.get("fuse.alpha"))
    fused = nm.add(ec_rep, h)
    vals = nm.transpose2d(fused)
    return EmbeddingSequence(T, cfg.embed_dim, vals)


def adaptation(x, e):
    """Modulate separator activations by an embedding.

    e may be a channel vector (C,) applied to every frame, or an
    EmbeddingSequence with per-frame rows e[t] applied frame by frame.
    Embeddings must already live in the activation channel space.
    """
    if isinstance(e, EmbeddingSequence):
        if e.dim != x.shape[0] or e.frames != x.shape[1]:
            raise ValueError(
                f"embedding sequence ({e.frames},{e.dim}) does not match activations {x.shape}"
            )
        return nm.mul(x, nm.transpose2d(e.values))
    e = e if isinstance(e, Tensor) else Tensor(e)
    if e.data.ndim != 1 or e.data.shape[0] != x.shape[0]:
        raise ValueError(f"embedding shape {e.shape} does not match activations {x.shape}")
    return nm.scale_channels(x, e)


def _project_embedding(e_c, cfg, ckpt, dynamic):
    """Map an embedding from dim N to the bottleneck width when they differ."""
    if cfg.embed_dim == cfg.bottleneck_channels:
        return e_c
    prefix = "adapt.dyn_proj." if dynamic else "adapt.proj."
    col = nm.reshape(e_c, (cfg.embed_dim, 1))
    out = nm.conv1d_causal(col, ckpt.get(prefix + "w"), ckpt.get(prefix + "b"))
    return nm.reshape(out, (cfg.bottleneck_channels,))


def _project_sequence(E: EmbeddingSequence, cfg, ckpt):
    vals = nm.transpose2d(E.values)                         # (N, T)
    if cfg.embed_dim != cfg.bottleneck_channels:
        vals = nm.conv1d_causal(
            vals, ckpt.get("adapt.dyn_proj.w"), ckpt.get("adapt.dyn_proj.b")
        )
    return vals                                             # (B, T)


def separate(Y, embedding, cfg, ckpt, mode="static"):
    """Frame representation + embedding -> sigmoid mask (enc_channels, T)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    g = ckpt.get
    x = nm.cumulative_layer_norm(Y, g("sep.norm.g"), g("sep.norm.b"))
    x = nm.conv1d_causal(x, g("sep.in.w"), g("sep.in.b"))
    blk = 0
    for r in range(cfg.repeats):
        for b in range(cfg.blocks_per_repeat):
            blk += 1
            x = _tcn_block(x, f"sep.r{r}.b{b}.", 2 ** b, cfg, ckpt)
            if blk == cfg.adaptation_block_index:
                if mode == "static":
                    v = _project_embedding(embedding, cfg, ckpt, dynamic=False)
                    x = adaptation(x, v)
                else:
                    if not isinstance(embedding, EmbeddingSequence):
                        raise ValueError("dynamic mode needs an EmbeddingSequence")
                    vals = _project_sequence(embedding, cfg, ckpt)
                    x = nm.mul(x, vals)
    m = nm.conv1d_causal(x, g("sep.mask.w"), g("sep.mask.b"))
    return nm.sigmoid(m)


def decode(Y, M, cfg, ckpt):
    """Masked frames -> waveform of length (T-1)*stride + kernel."""
    if Y.shape != M.shape:
        raise ValueError(f"mask shape {M.shape} != representation shape {Y.shape}")
    wave = nm.conv_transpose1d(nm.mul(Y, M), ckpt.get("dec.w"), cfg.stride)
    return nm.reshape(wave, (wave.shape[1],))


def forward(y, c, cfg, ckpt, condition=None, mode="static"):
    """Full extraction graph. Returns the estimated target waveform.

    In dynamic mode `condition` is the feedback waveform, already delayed,
    aligned with y sample for sample (same length).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y)
    Y = encode(y, cfg, ckpt)
    e_c = auxiliary_embed(c, cfg, ckpt)
    if mode == "static":
        if condition is not None:
            raise ValueError("static mode takes no condition waveform")
        M = separate(Y, e_c, cfg, ckpt, mode="static")
    else:
        if condition is None:
            raise ValueError("dynamic mode needs a condition waveform")
        cond_arr = np.asarray(
            condition.data if isinstance(condition, Tensor) else condition
        )
        if cond_arr.ndim != 1 or cond_arr.shape[0] != y_arr.shape[-1]:
            raise ValueError(
                f"condition length {cond_arr.shape} does not match mixture {y_arr.shape}"
            )
        e_s = speech_branch(condition, cfg, ckpt)
        E = fuse_embeddings(e_c, e_s, cfg, ckpt)
        M = separate(Y, E, cfg, ckpt, mode="dynamic")
    return decode(Y, M, cfg, ckpt)


def dump_embeddings(y, c, cfg, ckpt, condition, path):
    """Write the static row and per-frame fused embeddings as CSV."""
    e_c = auxiliary_embed(c, cfg, ckpt)
    e_s = speech_branch(condition, cfg, ckpt)
    E = fuse_embeddings(e_c, e_s, cfg, ckpt)
    N = cfg.embed_dim
    header = "frame," + ",".join(f"e{i}" for i in range(N))
    lines = [header]
    lines.append("static," + ",".join(repr(float(v)) for v in e_c.data))
    for t in range(E.frames):
        lines.append(f"{t}," + ",".join(repr(float(v)) for v in E.values.data[t]))
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return E
