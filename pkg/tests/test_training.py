"""Optimizer math, batch determinism, and training-loop bookkeeping."""

import dataclasses
import json

import numpy as np
import pytest

from scotkit.combiner import TENSOR_FIELDS, forward_batch, init_params, load_checkpoint
from scotkit.errors import (
    BadRangeError,
    ConfigError,
    EmptyBatchError,
    EmptyDatasetError,
    InvariantViolationError,
    NonFiniteLossError,
)
from scotkit.loss import LossConfig, total_loss
from scotkit.store import EmbeddingTable, TrainingExample
from scotkit.tensor import Pcg32
from scotkit.training import (
    AdamWConfig,
    AdamWState,
    TrainConfig,
    adamw_step,
    dropout_streams,
    make_batches,
    train,
)


def ones_params(d=1, value=1.0):
    params = init_params(d, p=1, h=1, dropout_rate=0.0, dtype=np.float64)
    filled = {name: np.full_like(t, value) for name, t in params.tensors().items()}
    return dataclasses.replace(params, **filled)


def toy_dataset(n, d=6, seed=0):
    rng = Pcg32(seed)
    out = []
    for k in range(n):
        vecs = rng.normal(4 * d).reshape(4, d)
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        out.append(
            TrainingExample(
                id=f"ex{k}",
                image=vecs[0].astype(np.float32),
                modification=vecs[1].astype(np.float32),
                target_text=vecs[2].astype(np.float32),
                original_text=vecs[3].astype(np.float32),
            )
        )
    return out


class TestAdamW:
    def test_unit_gradient_step(self):
        """theta=1, g=1, fresh state, lr 1e-4, wd 0.01: theta' = 0.999899000001."""
        params = ones_params()
        grads = {name: np.ones_like(t) for name, t in params.tensors().items()}
        new, state = adamw_step(
            params, grads, AdamWState.fresh(params), AdamWConfig(), learning_rate=1e-4
        )
        assert state.step == 1
        for name in TENSOR_FIELDS:
            np.testing.assert_allclose(
                getattr(new, name), 0.999899000001, rtol=0, atol=1e-12
            )

    def test_zero_gradient_is_pure_decay(self):
        """g=0 on a fresh state leaves only the decoupled decay: theta * (1 - lr wd)."""
        params = ones_params()
        grads = {name: np.zeros_like(t) for name, t in params.tensors().items()}
        new, _ = adamw_step(
            params, grads, AdamWState.fresh(params), AdamWConfig(), learning_rate=1e-4
        )
        for name in TENSOR_FIELDS:
            np.testing.assert_allclose(getattr(new, name), 0.999999, rtol=0, atol=1e-15)

    def test_zero_gradient_zero_decay_is_identity(self):
        params = ones_params()
        grads = {name: np.zeros_like(t) for name, t in params.tensors().items()}
        new, _ = adamw_step(
            params,
            grads,
            AdamWState.fresh(params),
            AdamWConfig(weight_decay=0.0),
            learning_rate=1e-4,
        )
        for name in TENSOR_FIELDS:
            assert np.array_equal(getattr(new, name), getattr(params, name))

    def test_functional_update_leaves_input_untouched(self):
        params = ones_params()
        grads = {name: np.ones_like(t) for name, t in params.tensors().items()}
        adamw_step(params, grads, AdamWState.fresh(params), AdamWConfig(), 1e-4)
        for name in TENSOR_FIELDS:
            assert np.all(getattr(params, name) == 1.0)

    def test_config_validation(self):
        with pytest.raises(BadRangeError):
            AdamWConfig(beta1=1.0)
        with pytest.raises(BadRangeError):
            AdamWConfig(eps=0.0)
        with pytest.raises(BadRangeError):
            AdamWConfig(weight_decay=-0.1)


class TestMakeBatches:
    def test_partition_complete_and_disjoint(self):
        data = toy_dataset(37)
        batches = make_batches(data, batch_size=8, seed=3, epoch=1)
        ids = [ex.id for b in batches for ex in b]
        assert sorted(ids) == sorted(ex.id for ex in data)
        assert [len(b) for b in batches] == [8, 8, 8, 8, 5]

    def test_remainder_below_min_dropped(self):
        data = toy_dataset(9)
        batches = make_batches(data, batch_size=8, seed=3, epoch=1)
        assert [len(b) for b in batches] == [8]

    def test_deterministic_per_seed_epoch(self):
        data = toy_dataset(20)
        a = make_batches(data, 4, seed=5, epoch=2)
        b = make_batches(data, 4, seed=5, epoch=2)
        assert [[ex.id for ex in batch] for batch in a] == [[ex.id for ex in batch] for batch in b]

    def test_epoch_changes_order(self):
        data = toy_dataset(20)
        a = make_batches(data, 4, seed=5, epoch=1)
        b = make_batches(data, 4, seed=5, epoch=2)
        assert [[ex.id for ex in batch] for batch in a] != [[ex.id for ex in batch] for batch in b]

    def test_empty_dataset(self):
        with pytest.raises(EmptyDatasetError):
            make_batches([], 4, seed=0, epoch=1)

    def test_single_example_yields_no_batch(self):
        with pytest.raises(EmptyBatchError):
            make_batches(toy_dataset(1), 8, seed=0, epoch=1)


class TestDropoutStreams:
    def test_streams_depend_only_on_coordinates(self):
        a = dropout_streams(7, epoch=2, batch_index=3, n_items=4)
        b = dropout_streams(7, epoch=2, batch_index=3, n_items=4)
        assert [r.u32s(8).tolist() for r in a] == [r.u32s(8).tolist() for r in b]

    def test_items_get_distinct_streams(self):
        streams = dropout_streams(7, epoch=1, batch_index=0, n_items=8)
        draws = [tuple(r.u32s(4).tolist()) for r in streams]
        assert len(set(draws)) == 8


class TestTrainLoop:
    def test_loss_log_matches_independent_recompute(self, tmp_path):
        """Each logged loss equals the objective evaluated outside the loop."""
        data = toy_dataset(23, d=5, seed=2)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=11, loss=LossConfig())
        params0 = init_params(5, dropout_rate=0.5, seed=4)
        result = train(data, cfg, params0)
        # replay: rebuild every batch and recompute the loss on the params
        # sequence reproduced by an identical run
        replay_params = init_params(5, dropout_rate=0.5, seed=4)
        state = AdamWState.fresh(replay_params)
        k = 0
        from scotkit.combiner import backward_batch

        for epoch in (1, 2):
            for b_idx, batch in enumerate(make_batches(data, 8, 11, epoch)):
                v = np.stack([ex.image for ex in batch])
                t_m = np.stack([ex.modification for ex in batch])
                tu = np.stack([ex.target_text for ex in batch])
                t = np.stack([ex.original_text for ex in batch])
                rngs = dropout_streams(11, epoch, b_idx, len(batch))
                composed, _, cache = forward_batch(replay_params, v, t_m, "train", rngs)
                bd = total_loss(composed, tu, t, cfg.loss)
                rec = result.records[k]
                assert rec.epoch == epoch and rec.batch == b_idx
                assert rec.l_total == pytest.approx(bd.l_total, abs=1e-6)
                assert rec.l_pos == pytest.approx(bd.l_pos, abs=1e-6)
                grads, _, _ = backward_batch(
                    replay_params, cache, bd.grad_composed.astype(composed.dtype)
                )
                replay_params, state = adamw_step(
                    replay_params, grads, state, cfg.adamw, cfg.learning_rate
                )
                k += 1
        assert k == len(result.records)
        for name in TENSOR_FIELDS:
            assert np.array_equal(getattr(result.params, name), getattr(replay_params, name))

    def test_checkpoints_and_metrics_files(self, tmp_path):
        data = toy_dataset(12, d=4, seed=3)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=1)
        result = train(
            data,
            cfg,
            init_params(4, seed=1),
            checkpoint_dir=tmp_path,
            metrics_path=tmp_path / "metrics.jsonl",
        )
        assert [p.split("/")[-1] for p in result.checkpoint_paths] == [
            "epoch_1.ckpt",
            "epoch_2.ckpt",
        ]
        final = load_checkpoint(tmp_path / "epoch_2.ckpt")
        for name in TENSOR_FIELDS:
            assert np.array_equal(getattr(final, name), getattr(result.params, name))
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == len(result.records) == 6
        rec = json.loads(lines[0])
        assert set(rec) == {"epoch", "batch", "L_pos", "L_neg_prime", "L_caption_neg", "L_total", "wall_ms"}

    def test_identical_runs_identical_params(self):
        data = toy_dataset(16, d=4, seed=5)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=9)
        a = train(data, cfg, init_params(4, seed=2))
        b = train(data, cfg, init_params(4, seed=2))
        for name in TENSOR_FIELDS:
            assert np.array_equal(getattr(a.params, name), getattr(b.params, name))
        assert [r.l_total for r in a.records] == [r.l_total for r in b.records]

    def test_image_target_source(self):
        data = toy_dataset(8, d=4, seed=6)
        rng = Pcg32(77)
        rows = rng.normal(8 * 4).reshape(8, 4)
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        table = EmbeddingTable(
            ids=[ex.id for ex in data], matrix=rows.astype(np.float32), source_tag="img"
        )
        cfg = TrainConfig(epochs=1, batch_size=4, seed=2, target_source="image")
        out = train(data, cfg, init_params(4, seed=3), image_targets=table)
        assert len(out.records) == 2

    def test_image_target_source_requires_table(self):
        cfg = TrainConfig(epochs=1, batch_size=4, target_source="image")
        with pytest.raises(ConfigError):
            train(toy_dataset(8, d=4), cfg, init_params(4, seed=0))

    def test_image_target_missing_id(self):
        data = toy_dataset(4, d=4, seed=8)
        rng = Pcg32(78)
        rows = rng.normal(2 * 4).reshape(2, 4)
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        table = EmbeddingTable(ids=["ex0", "ex1"], matrix=rows.astype(np.float32), source_tag="img")
        cfg = TrainConfig(epochs=1, batch_size=4, target_source="image")
        with pytest.raises(InvariantViolationError):
            train(data, cfg, init_params(4, seed=0), image_targets=table)

    def test_non_finite_loss_aborts_with_context(self):
        data = toy_dataset(8, d=4, seed=9)
        params = init_params(4, seed=4)
        bad = dataclasses.replace(params, b4=np.full_like(params.b4, np.nan))
        cfg = TrainConfig(epochs=1, batch_size=4, seed=0)
        with pytest.raises(NonFiniteLossError, match="epoch 1 batch 0"):
            train(data, cfg, bad)

    def test_resume_offsets_epoch_numbers(self, tmp_path):
        data = toy_dataset(8, d=4, seed=10)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
        out = train(data, cfg, init_params(4, seed=5), checkpoint_dir=tmp_path, start_epoch=2)
        assert [p.split("/")[-1] for p in out.checkpoint_paths] == [
            "epoch_3.ckpt",
            "epoch_4.ckpt",
        ]
        assert out.records[0].epoch == 3

    def test_config_validation(self):
        with pytest.raises(BadRangeError):
            TrainConfig(epochs=0)
        with pytest.raises(BadRangeError):
            TrainConfig(batch_size=1)
        with pytest.raises(ConfigError):
            TrainConfig(target_source="both")
