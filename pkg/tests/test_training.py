"""Losses, the optimizer, and the three training schedules on tiny data."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtse import numerics as nm
from dtse import training as tr
from dtse.architecture import (
    ModelConfig,
    init_checkpoint,
    is_dynamic_param,
)
from dtse.numerics import Tensor
from dtse.training import (
    AdamState,
    Dataset,
    TrainConfig,
    TrainRecord,
    hybrid_loss,
    make_ar_condition,
    optimizer_step,
)

F32 = np.float32

CFG = ModelConfig(
    enc_channels=8,
    bottleneck_channels=8,
    hidden_channels=8,
    blocks_per_repeat=2,
    repeats=1,
    embed_dim=8,
    adaptation_block_index=2,
    sample_delay=16,
    speech_branch_blocks=1,
    aux_blocks=1,
)


def toy_items(n, L=400, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        tgt = (rng.standard_normal(L) * 0.1).astype(F32)
        noise = (rng.standard_normal(L) * 0.1).astype(F32)
        enr = (rng.standard_normal(300) * 0.1).astype(F32)
        items.append((tgt + noise, tgt, enr))
    return items


def tiny_dataset(n_train=3, n_held=1, seed=0):
    items = toy_items(n_train + n_held, seed=seed)
    return Dataset(train=items[:n_train], heldout=items[n_train:])


@pytest.fixture(scope="module")
def baseline():
    return init_checkpoint(CFG, seed=0)


class TestTrainConfig:
    def test_defaults_validate(self):
        TrainConfig().validate()

    @pytest.mark.parametrize(
        "kw,msg",
        [
            (dict(mode="sgd"), "mode must be one of"),
            (dict(batch_size=0), ">= 1"),
            (dict(learning_rate=0.0), "learning_rate"),
            (dict(snr_weight=0.5, sisnr_weight=0.1), "sum to 1"),
            (dict(paris_weights=(0.5,)), "paris_weights"),
            (dict(paris_weights=(0.5, -0.1)), "paris_weights"),
            (dict(sample_delay=0), "sample_delay"),
        ],
    )
    def test_rejects(self, kw, msg):
        with pytest.raises(ValueError, match=msg):
            TrainConfig(**kw).validate()


class TestTrainRecord:
    def test_csv_and_lookup(self, tmp_path):
        rec = TrainRecord()
        rec.append(1, 1, 2.5, 0.1)
        rec.append(1, 2, 2.0, 0.4)
        rec.append(2, 1, 1.8, 0.9)
        path = tmp_path / "rec.csv"
        rec.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,epoch,loss,si_sdri"
        assert lines[1].startswith("1,1,")
        assert len(lines) == 4
        assert rec.last_si_sdri() == 0.9
        assert rec.last_si_sdri(iteration=1) == 0.4
        with pytest.raises(ValueError, match="no rows"):
            rec.last_si_sdri(iteration=5)
        with pytest.raises(ValueError, match="no rows"):
            TrainRecord().last_si_sdri()


class TestDatasetSplit:
    def test_sizes_and_disjoint(self):
        items = toy_items(10)
        ds = Dataset.split(items, heldout_fraction=0.2, seed=1)
        assert len(ds.heldout) == 2 and len(ds.train) == 8
        train_ids = {id(x) for x in ds.train}
        assert all(id(x) not in train_ids for x in ds.heldout)

    def test_at_least_one_heldout(self):
        ds = Dataset.split(toy_items(4), heldout_fraction=0.01)
        assert len(ds.heldout) == 1

    def test_seed_determinism(self):
        items = toy_items(6)
        a = Dataset.split(items, seed=3)
        b = Dataset.split(items, seed=3)
        assert [id(x) for x in a.train] == [id(x) for x in b.train]

    def test_too_few(self):
        with pytest.raises(ValueError, match="at least two"):
            Dataset.split(toy_items(1))


class TestMakeArCondition:
    def test_hand_case(self):
        np.testing.assert_array_equal(
            make_ar_condition([1.0, 2.0, 3.0], 2, 5), [0, 0, 1, 2, 3]
        )
        np.testing.assert_array_equal(
            make_ar_condition([1.0, 2.0, 3.0], 2, 4), [0, 0, 1, 2]
        )

    def test_delay_must_be_positive(self):
        with pytest.raises(ValueError, match="delay must be >= 1"):
            make_ar_condition([1.0, 2.0], 0)

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=60),
        delay=st.integers(min_value=1, max_value=70),
    )
    def test_shift_properties(self, n, delay):
        src = np.arange(1, n + 1, dtype=F32)
        out = make_ar_condition(src, delay)
        assert len(out) == n
        assert np.all(out[: min(delay, n)] == 0)
        kept = max(n - delay, 0)
        np.testing.assert_array_equal(out[delay : delay + kept], src[:kept])


class TestLosses:
    def test_hybrid_hand_value(self):
        est = Tensor(np.array([1.0, 1.0, -2.0], F32))
        ref = Tensor(np.array([1.0, 0.0, -1.0], F32))
        tcfg = TrainConfig()  # 0.9 snr + 0.1 si-snr
        expected = 0.9 * 0.0 + 0.1 * (-10.0 * np.log10(4.5 / 1.5))
        assert float(hybrid_loss(est, ref, tcfg).data) == pytest.approx(expected, abs=1e-3)

    def test_weights_respected(self):
        est = Tensor(np.random.default_rng(0).standard_normal(64).astype(F32))
        ref = Tensor(np.random.default_rng(1).standard_normal(64).astype(F32))
        only_snr = TrainConfig(snr_weight=1.0, sisnr_weight=0.0)
        assert float(hybrid_loss(est, ref, only_snr).data) == pytest.approx(
            float(tr.snr_loss(est, ref).data), abs=1e-6
        )


class TestOptimizer:
    def test_first_step_is_signed_lr(self):
        cfg = CFG
        ck = init_checkpoint(cfg, seed=0)
        name = "sep.in.b"
        ck.get(name).data[:] = 1.0
        g = np.full(ck.get(name).shape, 0.5, F32)
        opt = AdamState(learning_rate=0.1)
        optimizer_step({name: Tensor(g)}, ck, opt)
        # bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g)
        np.testing.assert_allclose(ck.get(name).data, 0.9, atol=1e-6)
        assert opt.t == 1

    def test_frozen_tensor_rejected(self):
        ck = init_checkpoint(CFG, seed=0)
        ck.freeze_baseline()
        opt = AdamState(learning_rate=0.1)
        g = np.zeros(ck.get("enc.w").shape, F32)
        with pytest.raises(ValueError, match="frozen tensor"):
            optimizer_step({"enc.w": Tensor(g)}, ck, opt)

    def test_shape_mismatch_rejected(self):
        ck = init_checkpoint(CFG, seed=0)
        opt = AdamState(learning_rate=0.1)
        with pytest.raises(ValueError, match="gradient shape"):
            optimizer_step({"enc.w": Tensor(np.zeros(3, F32))}, ck, opt)

    def test_missing_grads_leave_params(self):
        ck = init_checkpoint(CFG, seed=0)
        before = ck.get("dec.w").data.copy()
        opt = AdamState(learning_rate=0.1)
        g = np.ones(ck.get("enc.w").shape, F32)
        optimizer_step({"enc.w": Tensor(g)}, ck, opt)
        np.testing.assert_array_equal(ck.get("dec.w").data, before)

    def test_second_moment_shrinks_noisy_steps(self):
        # same |g| every step keeps the effective step near lr
        ck = init_checkpoint(CFG, seed=0)
        name = "sep.in.b"
        ck.get(name).data[:] = 0.0
        opt = AdamState(learning_rate=0.01)
        for _ in range(10):
            g = np.full(ck.get(name).shape, 1.0, F32)
            optimizer_step({name: Tensor(g)}, ck, opt)
        np.testing.assert_allclose(ck.get(name).data, -0.1, atol=1e-3)


class TestBaselineSchedule:
    def test_two_epochs(self):
        ds = tiny_dataset()
        tcfg = TrainConfig(mode="baseline", epochs_per_iteration=2, batch_size=2,
                           learning_rate=1e-3, seed=0)
        ckpt, rec = tr.train_baseline(ds, CFG, tcfg)
        assert len(rec.rows) == 2
        assert all(r[0] == 1 for r in rec.rows)
        assert np.isfinite(rec.rows[-1][2])
        fresh = init_checkpoint(CFG, seed=0)
        assert not np.array_equal(ckpt.get("enc.w").data, fresh.get("enc.w").data)

    def test_init_left_untouched(self):
        ds = tiny_dataset()
        start = init_checkpoint(CFG, seed=4)
        before = start.get("enc.w").data.copy()
        tcfg = TrainConfig(mode="baseline", epochs_per_iteration=1, batch_size=4, seed=0)
        tr.train_baseline(ds, CFG, tcfg, init=start)
        np.testing.assert_array_equal(start.get("enc.w").data, before)


class TestDenseSchedules:
    def test_delay_mismatch_rejected(self, baseline):
        tcfg = TrainConfig(mode="dense-ar", sample_delay=24)
        with pytest.raises(ValueError, match="training delay"):
            tr.train_ar(tiny_dataset(), CFG, tcfg, baseline)

    def test_dispatcher_requires_baseline(self):
        tcfg = TrainConfig(mode="dense-paris", epochs_per_iteration=1)
        with pytest.raises(ValueError, match="needs a baseline checkpoint"):
            tr.train(tiny_dataset(), CFG, tcfg)

    def test_ar_trains_only_the_extension(self, baseline):
        ds = tiny_dataset()
        tcfg = TrainConfig(mode="dense-ar", iterations=1, epochs_per_iteration=1,
                           batch_size=2, learning_rate=1e-3, seed=0)
        ckpt, rec = tr.train_ar(ds, CFG, tcfg, baseline)
        moved = 0
        for name, t in ckpt.entries.items():
            same = t.data.tobytes() == baseline.entries[name].data.tobytes()
            if is_dynamic_param(name):
                moved += 0 if same else 1
            else:
                assert same, f"baseline tensor {name} moved"
        assert moved > 0

    def test_ar_early_stop(self, baseline):
        ds = tiny_dataset()
        tcfg = TrainConfig(mode="dense-ar", iterations=3, epochs_per_iteration=1,
                           batch_size=2, learning_rate=1e-4, seed=0,
                           early_stop_db=1e9)
        _, rec = tr.train_ar(ds, CFG, tcfg, baseline)
        # an impossible improvement bar stops the schedule right after
        # the second iteration's comparison
        assert max(r[0] for r in rec.rows) == 2

    def test_ar_keep_iteration_ckpts(self, baseline):
        ds = tiny_dataset()
        tcfg = TrainConfig(mode="dense-ar", iterations=2, epochs_per_iteration=1,
                           batch_size=2, learning_rate=1e-3, seed=0,
                           early_stop_db=-1e9)
        ckpt, rec, snaps = tr.train_ar(ds, CFG, tcfg, baseline,
                                       keep_iteration_ckpts=True)
        assert len(snaps) == 2
        assert np.array_equal(snaps[-1].get("fuse.w").data, ckpt.get("fuse.w").data)
        assert max(r[0] for r in rec.rows) == 2

    def test_paris_trains_only_the_extension(self, baseline):
        ds = tiny_dataset()
        tcfg = TrainConfig(mode="dense-paris", epochs_per_iteration=1, batch_size=2,
                           learning_rate=1e-3, seed=0)
        ckpt, rec = tr.train_paris(ds, CFG, tcfg, baseline)
        assert len(rec.rows) == 1
        for name, t in ckpt.entries.items():
            if not is_dynamic_param(name):
                assert t.data.tobytes() == baseline.entries[name].data.tobytes()


class TestParisLoss:
    def test_weight_extremes_recover_single_passes(self):
        # (1, 0) weights reduce the two-pass loss to the zero-condition
        # pass; (0, 1) to the second pass conditioned on the first
        ck = init_checkpoint(CFG, seed=0)
        ck.freeze_baseline()
        mix, tgt, enr = toy_items(1, seed=9)[0]
        t1 = TrainConfig(mode="dense-paris", paris_weights=(1.0, 0.0))
        l1, _ = tr._paris_item_grads(mix, tgt, enr, CFG, ck, t1)
        zero_cond = np.zeros(len(mix), F32)
        direct1, _ = tr._item_grads(mix, tgt, enr, CFG, ck, t1, zero_cond, "dynamic")
        assert l1 == pytest.approx(direct1, abs=1e-6)

        t2 = TrainConfig(mode="dense-paris", paris_weights=(0.0, 1.0))
        l2, _ = tr._paris_item_grads(mix, tgt, enr, CFG, ck, t2)
        import dtse.architecture as arch

        est1 = arch.forward(mix, enr, CFG, ck, condition=zero_cond, mode="dynamic")
        cond2 = make_ar_condition(est1.data, t2.sample_delay, len(mix))
        direct2, _ = tr._item_grads(mix, tgt, enr, CFG, ck, t2, cond2, "dynamic")
        assert l2 == pytest.approx(direct2, abs=1e-6)

    def test_both_passes_contribute_gradient(self):
        ck = init_checkpoint(CFG, seed=0)
        ck.freeze_baseline()
        mix, tgt, enr = toy_items(1, seed=9)[0]
        tcfg = TrainConfig(mode="dense-paris")
        _, grads = tr._paris_item_grads(mix, tgt, enr, CFG, ck, tcfg)
        assert all(is_dynamic_param(n) for n in grads)
        assert "fuse.w" in grads and "spk.enc.w" in grads
        assert np.abs(grads["fuse.w"].data).max() > 0


class TestEvalSiSdri:
    def test_modes_run(self):
        ck = init_checkpoint(CFG, seed=0)
        items = toy_items(2, seed=3)
        for mode, conditioning in [("static", "self"), ("dynamic", "self"),
                                   ("dynamic", "oracle")]:
            v = tr.eval_si_sdri(items, CFG, ck, mode=mode, conditioning=conditioning)
            assert np.isfinite(v)
