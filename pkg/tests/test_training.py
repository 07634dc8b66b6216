"""Masking, objectives, Adam and the phase runner."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapterlab.checkpoint import checkpoint_bytes
from adapterlab.data import CLS, MASK, PAD, SEP, EncodedBatchSource
from adapterlab.errors import ConfigError, DataError, TrainingError
from adapterlab.metrics import compute_metrics, read_predictions, write_predictions
from adapterlab.model import AdapterConfig, ModelConfig, build_model, set_trainable
from adapterlab.tensor import Tensor
from adapterlab.training import (
    IGNORE_INDEX,
    Adam,
    Callback,
    MaskingPolicy,
    OptimizerConfig,
    Schedule,
    TrainPhase,
    adam_step,
    classification_loss,
    evaluate,
    mask_batch,
    mlm_loss,
    predictions,
    run_phase,
)

V = 40


def config(adapter=True, **kw):
    base = dict(vocab_size=V, max_seq_len=10, d_model=16, n_layers=1, n_heads=2, d_ff=32, dropout_rate=0.1)
    base.update(kw)
    return ModelConfig(adapter=AdapterConfig(bottleneck_dim=4) if adapter else None, **base)


def toy_corpus(n=64, seq=10, seed=0, labels=True):
    rng = np.random.default_rng(seed)
    ids = np.zeros((n, seq), dtype=np.int64)
    mask = np.zeros_like(ids)
    y = rng.integers(0, 2, n)
    for i in range(n):
        length = int(rng.integers(4, seq - 1))
        # repetitive: label 1 rows use ids 5..9, label 0 rows use 10..14
        body = rng.integers(5, 10, length) if y[i] else rng.integers(10, 15, length)
        row = [CLS] + body.tolist() + [SEP]
        ids[i, :len(row)] = row
        mask[i, :len(row)] = 1
    return EncodedBatchSource(ids, mask, y if labels else None, [f"ex-{i}" for i in range(n)])


def phase(kind="finetune", mode="with_adapter", length=2, unit="epochs", **opt):
    objective = "mlm" if kind == "task_specific_pretrain" else "classification"
    hp = dict(learning_rate=1e-2, batch_size=16)
    hp.update(opt)
    return TrainPhase(kind, objective, Schedule(length, unit, log_every=2), OptimizerConfig(**hp), mode)


class TestMasking:
    def test_zero_rate(self):
        ids = toy_corpus().token_ids
        corrupted, targets = mask_batch(ids, MaskingPolicy(mask_rate=0.0), V)
        assert np.array_equal(corrupted, ids)
        assert (targets == IGNORE_INDEX).all()

    def test_selection_count_binomial_bound(self):
        ids = np.full((100, 100), 7)
        _, targets = mask_batch(ids, MaskingPolicy(seed=3), V)
        assert 1350 <= (targets != IGNORE_INDEX).sum() <= 1650

    def test_split_fractions(self):
        ids = np.full((200, 100), 7)
        corrupted, targets = mask_batch(ids, MaskingPolicy(seed=4), V)
        sel = targets != IGNORE_INDEX
        n = sel.sum()
        frac_mask = (corrupted[sel] == MASK).sum() / n
        frac_keep = (corrupted[sel] == 7).sum() / n
        assert abs(frac_mask - 0.8) < 0.03
        # keep also absorbs random draws that happen to hit id 7
        assert abs(frac_keep - (0.1 + 0.1 / (V - 5))) < 0.03

    def test_deterministic(self):
        ids = toy_corpus().token_ids
        a = mask_batch(ids, MaskingPolicy(seed=9), V)
        b = mask_batch(ids, MaskingPolicy(seed=9), V)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_specials_never_selected(self):
        ids = toy_corpus().token_ids
        _, targets = mask_batch(ids, MaskingPolicy(mask_rate=1.0), V)
        special = np.isin(ids, [PAD, CLS, SEP, MASK])
        assert (targets[special] == IGNORE_INDEX).all()
        assert (targets[~special] == ids[~special]).all()

    def test_random_ids_are_not_special(self):
        ids = np.full((50, 50), 7)
        corrupted, _ = mask_batch(ids, MaskingPolicy(mask_rate=1.0, mask_token_frac=0.0, random_token_frac=1.0,
                                                     keep_frac=0.0), V)
        assert corrupted.min() >= 5 and corrupted.max() < V

    def test_no_maskable_tokens(self):
        with pytest.raises(DataError):
            mask_batch(np.array([[CLS, SEP, PAD]]), MaskingPolicy(), V)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            MaskingPolicy(mask_token_frac=0.5, random_token_frac=0.1, keep_frac=0.1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 1.0))
    def test_targets_hold_originals(self, seed, rate):
        ids = toy_corpus(n=8, seed=seed % 50).token_ids
        corrupted, targets = mask_batch(ids, MaskingPolicy(mask_rate=rate, seed=seed), V)
        sel = targets != IGNORE_INDEX
        assert np.array_equal(targets[sel], ids[sel])
        assert np.array_equal(corrupted[~sel], ids[~sel])


class TestLosses:
    def test_mlm_all_ignored(self):
        m = build_model(config(), 0)
        data = toy_corpus(n=4)
        loss = mlm_loss(m, data.token_ids, np.full_like(data.token_ids, IGNORE_INDEX), data.attention_mask)
        assert loss.item() == 0.0
        loss.backward()
        assert all(p.grad is None or not p.grad.any() for p in m.parameters())

    def test_mlm_untrained_near_log_v(self):
        m = build_model(config(), 0)
        data = toy_corpus(n=16)
        corrupted, targets = mask_batch(data.token_ids, MaskingPolicy(seed=0), V)
        loss = mlm_loss(m, corrupted, targets, data.attention_mask).item()
        assert abs(loss - math.log(V)) / math.log(V) < 0.2

    def test_mlm_decreases(self):
        m = build_model(config(adapter=False), 0)
        data = toy_corpus(n=64, labels=False)
        log = run_phase(m, phase("task_specific_pretrain", "without_adapter", 200, "iterations", learning_rate=3e-3),
                        data, seed=1)
        assert np.mean(log.losses[-20:]) < np.mean(log.losses[:20])

    def test_classification_untrained_near_log2(self):
        m = build_model(config(), 0)
        data = toy_corpus(n=32)
        loss = classification_loss(m, data.token_ids, data.attention_mask, data.labels).item()
        assert abs(loss - math.log(2)) < 0.05

    def test_gradient_reaches_adapters_only(self):
        m = build_model(config(), 0)
        set_trainable(m, "*.adapter|classifier|mlm_head")
        data = toy_corpus(n=8)
        # zero up-projections block the gradient into down-projections, so nudge them first
        for n, p in m.params.items():
            if ".up." in n:
                p.data = p.data + 0.01
        classification_loss(m, data.token_ids, data.attention_mask, data.labels).backward()
        for g, grp in m.groups.items():
            has = any(p.grad is not None for p in grp.params)
            assert has == grp.trainable or g == "mlm_head", g


class TestAdam:
    def test_first_step_hand_computed(self):
        p = Tensor([1.0], requires_grad=True)
        adam_step(p, np.array([1.0]), np.zeros(1), np.zeros(1), 1, OptimizerConfig(learning_rate=0.1))
        # m_hat = 1, v_hat = 1, update = 1 / (1 + 1e-8)
        assert abs(p.data[0] - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15

    def test_zero_grads_leave_params(self):
        p = Tensor([0.3, -0.2], requires_grad=True)
        adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, OptimizerConfig())
        assert p.data.tolist() == [0.3, -0.2]

    def test_lr_zero(self):
        m = build_model(config(adapter=False), 0)
        set_trainable(m, "*")
        before = checkpoint_bytes(m)
        data = toy_corpus(n=8)
        opt = Adam(m, OptimizerConfig(learning_rate=0.0))
        classification_loss(m, data.token_ids, data.attention_mask, data.labels).backward()
        opt.step()
        assert checkpoint_bytes(m) == before

    def test_two_steps_match_reference(self):
        # independent scalar recurrence
        cfg = OptimizerConfig(learning_rate=0.05, betas=(0.8, 0.95), eps=1e-6)
        p = Tensor([2.0], requires_grad=True)
        m = v = np.zeros(1)
        ref, rm, rv = 2.0, 0.0, 0.0
        for step, g in enumerate([0.5, -1.5], start=1):
            m, v = adam_step(p, np.array([g]), m, v, step, cfg)
            rm, rv = 0.8 * rm + 0.2 * g, 0.95 * rv + 0.05 * g * g
            ref -= 0.05 * (rm / (1 - 0.8**step)) / (math.sqrt(rv / (1 - 0.95**step)) + 1e-6)
        assert abs(p.data[0] - ref) < 1e-15

    def test_clipping_scales_global_norm(self):
        m = build_model(config(adapter=False), 0)
        set_trainable(m, "*")
        for p in m.parameters():
            p.grad = np.full(p.shape, 10.0)
        opt = Adam(m, OptimizerConfig(learning_rate=0.1, grad_clip_norm=1.0))
        opt.step()
        # Adam is scale-invariant on its first step, so the update still equals lr per coordinate
        name = "pooler.bias"
        mom = opt.state[name][0]
        total = math.sqrt(sum(p.size for p in m.parameters()) * 100.0)
        np.testing.assert_allclose(mom, 0.1 * 10.0 / (total + 1e-6), rtol=1e-12)

    def test_nan_names_group(self):
        m = build_model(config(), 0)
        set_trainable(m, "*.adapter|classifier|mlm_head")
        m.params["block_0.adapter.ffn.down.weight"].grad = np.full((16, 4), np.nan)
        with pytest.raises(TrainingError, match="block_0.adapter"):
            Adam(m, OptimizerConfig()).step()

    def test_frozen_untouched_after_50_steps(self):
        m = build_model(config(), 0)
        data = toy_corpus()
        before = checkpoint_bytes(m, m.backbone_groups())
        run_phase(m, phase(length=50, unit="iterations"), data, seed=0)
        assert checkpoint_bytes(m, m.backbone_groups()) == before


class TestRunPhase:
    def test_zero_epochs(self):
        m = build_model(config(), 0)
        before = checkpoint_bytes(m)
        log = run_phase(m, phase(length=0), toy_corpus(), seed=0)
        assert checkpoint_bytes(m) == before
        assert log.losses == [] and log.records == []

    def test_checkpoint_files(self, tmp_path):
        m = build_model(config(adapter=False), 0)
        sched = Schedule(20, "iterations", checkpoint_at=tuple(range(2, 21, 2)), log_every=5)
        ph = TrainPhase("task_specific_pretrain", "mlm", sched, OptimizerConfig(batch_size=8), "without_adapter")
        log = run_phase(m, ph, toy_corpus(labels=False), seed=0, run_id="r", out_dir=tmp_path)
        files = sorted(p.name for p in tmp_path.glob("*.ckpt"))
        assert len(files) == 10
        assert "r-tsp-2.ckpt" in files and "r-tsp-20.ckpt" in files
        assert sorted(log.checkpoints) == list(range(2, 21, 2))

    def test_rerun_identical_log(self):
        logs = []
        for _ in range(2):
            m = build_model(config(), 0)
            logs.append(run_phase(m, phase(length=2), toy_corpus(), seed=5))
        assert logs[0].losses == logs[1].losses
        assert logs[0].deterministic_records() == logs[1].deterministic_records()

    def test_seed_changes_log(self):
        a = run_phase(build_model(config(), 0), phase(length=1), toy_corpus(), seed=1).losses
        b = run_phase(build_model(config(), 0), phase(length=1), toy_corpus(), seed=2).losses
        assert a != b

    def test_log_record_schema(self, tmp_path):
        m = build_model(config(), 0)
        log = run_phase(m, phase(length=1), toy_corpus(), seed=0)
        rec = log.records[0]
        assert set(rec) == {"phase", "iteration", "loss", "lr", "grad_norms", "wall_ms"}
        assert set(rec["grad_norms"]) == set(m.groups)
        path = tmp_path / "log.jsonl"
        log.write_jsonl(path)
        assert len(path.read_text().splitlines()) == len(log.records)

    def test_with_adapter_pipeline_freezes_backbone(self):
        m = build_model(config(), 0)
        before = checkpoint_bytes(m, m.backbone_groups())
        run_phase(m, phase("task_specific_pretrain", length=20, unit="iterations"), toy_corpus(labels=False), seed=0)
        run_phase(m, phase(length=2), toy_corpus(), seed=0)
        assert checkpoint_bytes(m, m.backbone_groups()) == before

    def test_without_adapter_updates_everything(self):
        m = build_model(config(adapter=False), 0)
        before = m.state_dict()
        run_phase(m, phase(mode="without_adapter", length=1), toy_corpus(), seed=0)
        changed = {n for n, p in m.params.items() if p.data.tobytes() != before[n].tobytes()}
        # the MLM bias gets no gradient from a classification loss
        assert changed == set(m.params) - {"mlm_head.bias"}

    def test_mode_mismatch(self):
        with pytest.raises(ConfigError):
            run_phase(build_model(config(adapter=False), 0), phase(), toy_corpus(), seed=0)
        with pytest.raises(ConfigError):
            run_phase(build_model(config(), 0), phase(mode="without_adapter"), toy_corpus(), seed=0)

    def test_adapter_mode_rejects_backbone_pattern(self):
        with pytest.raises(ConfigError):
            ph = TrainPhase("finetune", "classification", Schedule(1, "epochs"), OptimizerConfig(),
                            "with_adapter", "*")
            run_phase(build_model(config(), 0), ph, toy_corpus(), seed=0)

    def test_tsp_requires_mlm(self):
        with pytest.raises(ConfigError):
            TrainPhase("task_specific_pretrain", "classification", Schedule(1), OptimizerConfig())

    def test_callbacks(self):
        seen = []

        class Spy(Callback):
            def on_epoch_end(self, epoch, iteration, model):
                seen.append((epoch, iteration))

        run_phase(build_model(config(), 0), phase(length=3), toy_corpus(n=40), seed=0, callbacks=[Spy()])
        assert seen == [(1, 3), (2, 6), (3, 9)]

    def test_mlm_loss_invariant_to_batch_order(self):
        m = build_model(config(), 0)
        data = toy_corpus(n=16)
        corrupted, targets = mask_batch(data.token_ids, MaskingPolicy(seed=0), V)
        # per-example sums, so batch order only reorders terms
        perm = np.random.default_rng(0).permutation(16)
        a = mlm_loss(m, corrupted, targets, data.attention_mask).item()
        b = mlm_loss(m, corrupted[perm], targets[perm], data.attention_mask[perm]).item()
        assert abs(a - b) < 1e-12


class TestEvaluate:
    def test_constant_predictor(self):
        m = build_model(config(), 0)
        m.params["classifier.bias"].data = np.array([10.0, -10.0])
        data = toy_corpus(n=40)
        data.labels[:] = np.arange(40) % 2
        assert evaluate(m, data, ("accuracy",))["accuracy"] == 0.5

    def test_no_dropout_at_eval(self):
        m = build_model(config(dropout_rate=0.5), 0)
        data = toy_corpus(n=12)
        assert evaluate(m, data, ("accuracy", "f1")) == evaluate(m, data, ("accuracy", "f1"))

    def test_empty(self):
        empty = EncodedBatchSource(np.zeros((0, 10), dtype=np.int64), np.zeros((0, 10), dtype=np.int64),
                                   np.zeros(0, dtype=np.int64), [])
        with pytest.raises(DataError):
            evaluate(build_model(config(), 0), empty)

    def test_recompute_from_prediction_dump(self, tmp_path):
        m = build_model(config(adapter=False), 0)
        data = toy_corpus(n=64)
        run_phase(m, phase(mode="without_adapter", length=3), data, seed=0)
        got = evaluate(m, data, ("accuracy", "f1", "mcc"))
        path = tmp_path / "preds.csv"
        write_predictions(path, data.example_ids, predictions(m, data), data.labels)
        _, preds, labels = read_predictions(path)
        assert compute_metrics(preds, labels, ("accuracy", "f1", "mcc")).metrics == got
