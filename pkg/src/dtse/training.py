"""Losses, condition construction, the optimizer, and the three
training schedules.

baseline     static enrollment conditioning, whole network trains
dense-ar     baseline weights frozen; the dynamic extension trains on a
             condition waveform that iteration 1 takes from the delayed
             target (teacher forcing) and later iterations regenerate
             once per iteration from the frozen model's own streaming
             output; the loss covers only the current pass
dense-paris  baseline frozen; each batch runs two passes in one graph:
             pass 1 conditions on a zero waveform, pass 2 on the delayed
             pass-1 estimate treated as a constant, and one backward
             minimizes the weighted sum of both pass losses
"""

from dataclasses import dataclass, field

import numpy as np

from . import architecture as arch
from . import metrics
from . import numerics as nm
from . import streaming as strm
from .numerics import Tensor

F32 = np.float32

TRAIN_MODES = ("baseline", "dense-ar", "dense-paris")


@dataclass
class TrainConfig:
    mode: str = "baseline"
    iterations: int = 3               # outer loops of the AR schedule
    epochs_per_iteration: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    snr_weight: float = 0.9
    sisnr_weight: float = 0.1
    paris_weights: tuple = (0.5, 0.5)
    sample_delay: int = 16
    early_stop_db: float = 0.1        # minimum per-iteration improvement
    seed: int = 0

    def validate(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.iterations < 1 or self.epochs_per_iteration < 1 or self.batch_size < 1:
            raise ValueError("iterations, epochs_per_iteration and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if abs(self.snr_weight + self.sisnr_weight - 1.0) > 1e-6:
            raise ValueError("snr_weight and sisnr_weight must sum to 1")
        if len(self.paris_weights) != 2 or any(w < 0 for w in self.paris_weights):
            raise ValueError("paris_weights must be two non-negative numbers")
        if self.sample_delay < 1:
            raise ValueError("sample_delay must be >= 1")
        return self


@dataclass
class TrainRecord:
    """Per-epoch rows: (iteration, epoch, mean train loss, held-out
    SI-SDR improvement in dB)."""

    rows: list = field(default_factory=list)

    def append(self, iteration, epoch, loss, si_sdri):
        self.rows.append((int(iteration), int(epoch), float(loss), float(si_sdri)))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,epoch,loss,si_sdri\n")
            for it, ep, lo, si in self.rows:
                fh.write(f"{it},{ep},{lo!r},{si!r}\n")

    def last_si_sdri(self, iteration=None):
        rows = self.rows if iteration is None else [r for r in self.rows if r[0] == iteration]
        if not rows:
            raise ValueError("no rows recorded")
        return rows[-1][3]


@dataclass
class Dataset:
    """Lists of (mixture, target, enrollment) float32 triples."""

    train: list
    heldout: list

    @classmethod
    def split(cls, items, heldout_fraction=0.1, seed=0):
        items = list(items)
        if len(items) < 2:
            raise ValueError("need at least two items to split")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(items))
        n_held = max(1, int(round(len(items) * heldout_fraction)))
        held = [items[i] for i in order[:n_held]]
        train = [items[i] for i in order[n_held:]]
        return cls(train=train, heldout=held)


# ---------------------------------------------------------------------------
# losses


def snr_loss(est, ref, eps=nm.EPS, clamp_db=60.0):
    """Negative SNR in dB (lower is better)."""
    return nm.snr_loss(est, ref, eps=eps, clamp_db=clamp_db)


def si_snr_loss(est, ref, eps=nm.EPS, clamp_db=60.0):
    """Negative scale-invariant SNR in dB (lower is better)."""
    return nm.si_snr_loss(est, ref, eps=eps, clamp_db=clamp_db)


def hybrid_loss(est, ref, cfg: TrainConfig):
    """snr_weight * snr_loss + sisnr_weight * si_snr_loss."""
    a = nm.scale(snr_loss(est, ref), cfg.snr_weight)
    b = nm.scale(si_snr_loss(est, ref), cfg.sisnr_weight)
    return nm.add(a, b)


def make_ar_condition(source, delay, length=None):
    """Shift a waveform right by `delay` samples, zero-filled at the
    front, trimmed or zero-padded to `length`."""
    src = np.asarray(source, F32).ravel()
    if delay < 1:
        raise ValueError(f"delay must be >= 1, got {delay}")
    n = len(src) if length is None else int(length)
    out = np.zeros(n, F32)
    take = min(n - delay, len(src))
    if take > 0:
        out[delay : delay + take] = src[:take]
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Per-tensor first/second moment store for Adam."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {}
        self.v = {}


def optimizer_step(grads, ckpt: arch.Checkpoint, state: AdamState):
    """Apply one Adam update in place. Rejects gradients aimed at frozen
    tensors; missing gradients simply leave their tensors alone."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        param = ckpt.get(name)
        if not param.trainable:
            raise ValueError(f"gradient supplied for frozen tensor {name!r}")
        garr = g.data if isinstance(g, Tensor) else np.asarray(g, F32)
        if garr.shape != param.data.shape:
            raise ValueError(
                f"gradient shape {garr.shape} != parameter shape {param.data.shape} for {name!r}"
            )
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * garr
        v = b2 * v + (1.0 - b2) * garr * garr
        state.m[name] = m
        state.v[name] = v
        mh = m / bias1
        vh = v / bias2
        param.data -= (state.lr * mh / (np.sqrt(vh) + state.eps)).astype(F32)


# ---------------------------------------------------------------------------
# shared schedule machinery


def _item_grads(mix, tgt, enr, cfg, ckpt, tcfg, condition, mode):
    with nm.record() as g:
        est = arch.forward(mix, enr, cfg, ckpt, condition=condition, mode=mode)
        ref = Tensor(np.asarray(tgt, F32)[: est.data.shape[0]])
        loss = hybrid_loss(est, ref, tcfg)
    return float(loss.data), nm.backward(g, loss)


def _paris_item_grads(mix, tgt, enr, cfg, ckpt, tcfg):
    w1, w2 = tcfg.paris_weights
    zero_cond = np.zeros(len(mix), F32)
    with nm.record() as g:
        est1 = arch.forward(mix, enr, cfg, ckpt, condition=zero_cond, mode="dynamic")
        ref = Tensor(np.asarray(tgt, F32)[: est1.data.shape[0]])
        l1 = hybrid_loss(est1, ref, tcfg)
        cond2 = make_ar_condition(est1.data, tcfg.sample_delay, len(mix))
        est2 = arch.forward(mix, enr, cfg, ckpt, condition=cond2, mode="dynamic")
        l2 = hybrid_loss(est2, ref, tcfg)
        loss = nm.add(nm.scale(l1, w1), nm.scale(l2, w2))
    return float(loss.data), nm.backward(g, loss)


def _accumulate(total, grads, scale):
    for name, t in grads.items():
        arr = t.data * scale
        if name in total:
            total[name] += arr
        else:
            total[name] = arr


def _run_epoch(items, conditions, cfg, ckpt, tcfg, opt, rng, item_fn):
    order = rng.permutation(len(items))
    losses = []
    for start in range(0, len(order), tcfg.batch_size):
        batch = order[start : start + tcfg.batch_size]
        total = {}
        for idx in batch:
            mix, tgt, enr = items[idx]
            cond = None if conditions is None else conditions[idx]
            lval, grads = item_fn(mix, tgt, enr, cond)
            losses.append(lval)
            _accumulate(total, grads, 1.0 / len(batch))
        optimizer_step(total, ckpt, opt)
    return float(np.mean(losses))


def eval_si_sdri(items, cfg, ckpt, mode="static", conditioning="self"):
    """Mean held-out SI-SDR improvement. Dynamic mode conditions either
    on the engine's own streamed output ("self") or on the delayed true
    target ("oracle")."""
    vals = []
    for mix, tgt, enr in items:
        if mode == "static":
            est = arch.forward(mix, enr, cfg, ckpt, mode="static").data
        elif conditioning == "oracle":
            cond = make_ar_condition(tgt, cfg.sample_delay, len(mix))
            est = arch.forward(mix, enr, cfg, ckpt, condition=cond, mode="dynamic").data
        else:
            est, _ = strm.run_stream(mix, enr, cfg, ckpt, mode="dynamic")
        n = len(est)
        vals.append(metrics.si_sdr(est, tgt[:n]) - metrics.si_sdr(mix[:n], tgt[:n]))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# schedules


def train_baseline(dataset: Dataset, cfg: arch.ModelConfig, tcfg: TrainConfig,
                   init=None):
    """Static-mode training of the whole network from scratch (or from a
    given starting checkpoint)."""
    tcfg.validate()
    ckpt = init.copy() if init is not None else arch.init_checkpoint(cfg, tcfg.seed)
    ckpt.validate_against_config()
    opt = AdamState(tcfg.learning_rate)
    record = TrainRecord()
    rng = np.random.default_rng(tcfg.seed + 1)

    def item_fn(mix, tgt, enr, cond):
        return _item_grads(mix, tgt, enr, cfg, ckpt, tcfg, None, "static")

    for epoch in range(1, tcfg.epochs_per_iteration + 1):
        mean_loss = _run_epoch(dataset.train, None, cfg, ckpt, tcfg, opt, rng, item_fn)
        si = eval_si_sdri(dataset.heldout, cfg, ckpt, mode="static")
        record.append(1, epoch, mean_loss, si)
    return ckpt, record


def _check_dense_setup(cfg, tcfg, baseline_ckpt):
    tcfg.validate()
    if tcfg.sample_delay != cfg.sample_delay:
        raise ValueError(
            f"training delay {tcfg.sample_delay} != model delay {cfg.sample_delay}"
        )
    ckpt = baseline_ckpt.copy()
    ckpt.validate_against_config()
    ckpt.freeze_baseline()
    return ckpt


def train_ar(dataset: Dataset, cfg: arch.ModelConfig, tcfg: TrainConfig,
             baseline_ckpt, keep_iteration_ckpts=False):
    """Iterated feedback training of the dynamic extension.

    Iteration 1 conditions every item on the delayed clean target; each
    later iteration first regenerates all conditions by running the
    current frozen model in self-feedback streaming, then trains on
    those fixed conditions. Stops early once an iteration improves the
    held-out score by less than early_stop_db."""
    ckpt = _check_dense_setup(cfg, tcfg, baseline_ckpt)
    record = TrainRecord()
    rng = np.random.default_rng(tcfg.seed + 2)
    snapshots = []
    prev_si = None

    def item_fn(mix, tgt, enr, cond):
        return _item_grads(mix, tgt, enr, cfg, ckpt, tcfg, cond, "dynamic")

    conditions = [
        make_ar_condition(tgt, tcfg.sample_delay, len(mix))
        for mix, tgt, enr in dataset.train
    ]
    for it in range(1, tcfg.iterations + 1):
        if it > 1:
            conditions = []
            for mix, tgt, enr in dataset.train:
                out, _ = strm.run_stream(mix, enr, cfg, ckpt, mode="dynamic")
                conditions.append(make_ar_condition(out, tcfg.sample_delay, len(mix)))
        opt = AdamState(tcfg.learning_rate)
        for epoch in range(1, tcfg.epochs_per_iteration + 1):
            mean_loss = _run_epoch(
                dataset.train, conditions, cfg, ckpt, tcfg, opt, rng, item_fn
            )
            si = eval_si_sdri(dataset.heldout, cfg, ckpt, mode="dynamic")
            record.append(it, epoch, mean_loss, si)
        it_si = record.last_si_sdri(iteration=it)
        if keep_iteration_ckpts:
            snapshots.append(ckpt.copy())
        if prev_si is not None and it_si - prev_si < tcfg.early_stop_db:
            break
        prev_si = it_si
    if keep_iteration_ckpts:
        return ckpt, record, snapshots
    return ckpt, record


def train_paris(dataset: Dataset, cfg: arch.ModelConfig, tcfg: TrainConfig,
                baseline_ckpt):
    """Two-pass single-backward training of the dynamic extension."""
    ckpt = _check_dense_setup(cfg, tcfg, baseline_ckpt)
    record = TrainRecord()
    rng = np.random.default_rng(tcfg.seed + 3)
    opt = AdamState(tcfg.learning_rate)

    def item_fn(mix, tgt, enr, cond):
        return _paris_item_grads(mix, tgt, enr, cfg, ckpt, tcfg)

    for epoch in range(1, tcfg.epochs_per_iteration + 1):
        mean_loss = _run_epoch(dataset.train, None, cfg, ckpt, tcfg, opt, rng, item_fn)
        si = eval_si_sdri(dataset.heldout, cfg, ckpt, mode="dynamic")
        record.append(1, epoch, mean_loss, si)
    return ckpt, record


def train(dataset: Dataset, cfg: arch.ModelConfig, tcfg: TrainConfig,
          baseline_ckpt=None, init=None):
    """Dispatch on tcfg.mode; dense modes require a baseline checkpoint."""
    tcfg.validate()
    if tcfg.mode == "baseline":
        return train_baseline(dataset, cfg, tcfg, init=init)
    if baseline_ckpt is None:
        raise ValueError(f"{tcfg.mode} training needs a baseline checkpoint")
    if tcfg.mode == "dense-ar":
        return train_ar(dataset, cfg, tcfg, baseline_ckpt)
    return train_paris(dataset, cfg, tcfg, baseline_ckpt)
