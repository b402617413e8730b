from __future__ import annotations

import csv

import numpy as np
import pytest

from brst import tensor as T
from brst.config import load_train_config
from brst.corpus import read_manifest
from brst.errors import ConfigError, ContractError, TrainingAbortedError
from brst.model import Vocabulary, build_model
from brst.train import (
    METRIC_FIELDS,
    Batch,
    OptimizerState,
    adam_update,
    attention_nll,
    build_batch,
    clip_gradients,
    compute_gradients,
    epoch_order,
    joint_loss,
    latest_checkpoint,
    lr_at,
    make_batches,
    run_training,
    smoothed_trend,
    train_step,
)

from .conftest import random_features, tiny_config


@pytest.fixture
def batch() -> Batch:
    return Batch(
        utt_ids=["a", "b"],
        features=[random_features(40, seed=1), random_features(33, seed=2)],
        targets=[[2, 3, 3], [5]],
    )


def _toy_train_config(**overrides):
    payload = {
        "max_steps": 4,
        "batch_size": 2,
        "checkpoint_every": 2,
        "log_every": 1,
        "warmup_steps": 10,
        "peak_lr": 0.01,
        "spec_augment": {"max_time_frames": 3, "max_freq_bins": 5},
    }
    payload.update(overrides)
    return load_train_config(**payload)


class TestJointLoss:
    def test_weight_boundaries_isolate_each_objective(self, tiny_params, batch):
        only_ctc = joint_loss(tiny_params, batch, ctc_weight=1.0)
        only_att = joint_loss(tiny_params, batch, ctc_weight=0.0)
        assert only_ctc.total.item() == pytest.approx(only_ctc.ctc.item())
        assert only_att.total.item() == pytest.approx(only_att.att.item())

    def test_total_is_linear_in_the_weight(self, tiny_params, batch):
        ctc, att = joint_loss(tiny_params, batch, 0.5).values[1:]
        for weight in (0.0, 0.3, 0.7, 1.0):
            total = joint_loss(tiny_params, batch, weight).total.item()
            assert total == pytest.approx(weight * ctc + (1.0 - weight) * att)

    def test_only_ctc_weight_leaves_decoder_without_gradient(self, tiny_params, batch):
        cfg = load_train_config(ctc_weight=1.0)
        _, grads = compute_gradients(tiny_params, batch, cfg)
        assert not np.any(grads["decoder.output.weight"])
        assert np.any(grads["ctc.weight"])

    def test_attention_nll_and_label_smoothing(self):
        logits = np.random.default_rng(0).standard_normal((2, 3, 5))
        logprobs = T.log_softmax(T.Tensor(logits))
        targets = [[1, 4, 0], [2]]
        picked = logprobs.data[0, [0, 1, 2], [1, 4, 0]].sum() + logprobs.data[1, 0, 2]
        assert attention_nll(logprobs, targets).item() == pytest.approx(-picked)
        spread = logprobs.data[0].sum() / 5 + logprobs.data[1, 0].sum() / 5
        smoothed = attention_nll(logprobs, targets, label_smoothing=0.1).item()
        assert smoothed == pytest.approx(-(0.9 * picked + 0.1 * spread))

    def test_non_finite_loss_aborts(self, tiny_params, batch):
        params = tiny_params.clone()
        params["decoder.output.bias"].data[:] = np.nan
        with pytest.raises(TrainingAbortedError):
            compute_gradients(params, batch, load_train_config())


class TestOptimization:
    def test_warmup_then_inverse_square_root(self):
        cfg = load_train_config(peak_lr=0.002, warmup_steps=25000)
        assert lr_at(1, cfg) == pytest.approx(0.002 / 25000)
        assert lr_at(12500, cfg) == pytest.approx(0.001)
        assert lr_at(25000, cfg) == 0.002
        assert lr_at(100000, cfg) == pytest.approx(0.001)
        with pytest.raises(ContractError):
            lr_at(0, cfg)

    def test_clipping_rescales_to_the_limit(self):
        grads = {"a": np.array([6.0, 0.0]), "b": np.array([8.0])}
        clipped, norm = clip_gradients(grads, 5.0)
        assert norm == pytest.approx(10.0)
        np.testing.assert_allclose(clipped["a"], [3.0, 0.0])
        np.testing.assert_allclose(clipped["b"], [4.0])

    def test_small_gradients_pass_through(self):
        grads = {"a": np.array([0.3, 0.4])}
        clipped, norm = clip_gradients(grads, 5.0)
        assert clipped is grads
        assert norm == pytest.approx(0.5)

    def test_first_adam_step_moves_by_learning_rate(self, tiny_params):
        params = tiny_params.clone()
        before = params["ctc.bias"].data.copy()
        grads = {name: np.zeros_like(t.data) for name, t in params.store.items()}
        grads["ctc.bias"] = np.linspace(-1.0, 1.0, before.shape[0])
        grads["ctc.bias"][3] = 0.0
        state = OptimizerState.zeros_like(params)
        adam_update(params, grads, state, 0.01, load_train_config())
        step = params["ctc.bias"].data - before
        np.testing.assert_allclose(step, -0.01 * np.sign(grads["ctc.bias"]), atol=1e-6)
        assert state.step == 1

    def test_train_step_is_deterministic(self, tiny_params, batch):
        cfg = load_train_config(warmup_steps=5, peak_lr=0.01)
        first, second = tiny_params.clone(), tiny_params.clone()
        m1 = train_step(first, OptimizerState.zeros_like(first), batch, cfg)
        m2 = train_step(second, OptimizerState.zeros_like(second), batch, cfg)
        assert m1 == m2
        assert first.store.allclose(second.store)
        assert not first.store.allclose(tiny_params.store)


class TestBatching:
    def test_epoch_order_is_a_seeded_permutation(self):
        order = epoch_order(10, epoch=3, seed=7)
        assert sorted(order.tolist()) == list(range(10))
        np.testing.assert_array_equal(order, epoch_order(10, epoch=3, seed=7))
        assert not np.array_equal(order, epoch_order(10, epoch=4, seed=7))

    def test_batches_cover_everything_longest_first(self, toy_utterances):
        batches = make_batches(toy_utterances, 4, epoch=0, seed=0)
        assert sorted(i for b in batches for i in b) == list(range(len(toy_utterances)))
        for indices in batches:
            lengths = [toy_utterances[i].features.shape[0] for i in indices]
            assert lengths == sorted(lengths, reverse=True)

    def test_masks_are_reproducible(self, toy_utterances):
        cfg = _toy_train_config()
        a = build_batch(toy_utterances, [0, 1], cfg, epoch=0)
        b = build_batch(toy_utterances, [0, 1], cfg, epoch=0)
        for x, y in zip(a.features, b.features):
            np.testing.assert_array_equal(x, y)

    def test_smoothed_trend(self):
        assert smoothed_trend([3.0] * 50 + [2.0] * 50 + [1.0] * 50)
        assert not smoothed_trend([1.0] * 50 + [2.0] * 50)
        assert smoothed_trend([5.0, 9.0])


class TestRunTraining:
    def test_writes_metrics_and_checkpoints(self, tmp_path, toy_manifest, toy_vocab):
        result = run_training(
            read_manifest(toy_manifest), _toy_train_config(), tiny_config(), tmp_path / "run", vocab=toy_vocab
        )
        names = [p.name for p in result.checkpoints]
        assert names == ["step_0000002.brst", "step_0000004.brst"]
        assert (tmp_path / "run" / "checkpoints" / "step_0000004.brst.opt").exists()
        with (tmp_path / "run" / "metrics.csv").open(newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == METRIC_FIELDS
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
        assert all(np.isfinite(float(v)) for r in rows[1:] for v in r)

    def test_resume_replays_the_uninterrupted_run(self, tmp_path, toy_manifest, toy_vocab):
        entries = read_manifest(toy_manifest)
        straight = run_training(entries, _toy_train_config(), tiny_config(), tmp_path / "a", vocab=toy_vocab)

        run_training(entries, _toy_train_config(max_steps=2), tiny_config(), tmp_path / "b", vocab=toy_vocab)
        resumed = run_training(
            entries, _toy_train_config(), tiny_config(), tmp_path / "b", vocab=toy_vocab, resume=True
        )
        assert resumed.params.store.allclose(straight.params.store)
        assert [m.step for m in resumed.metrics] == [3, 4]
        assert latest_checkpoint(tmp_path / "b").name == "step_0000004.brst"

    def test_same_seed_gives_identical_checkpoint_bytes(self, tmp_path, toy_manifest, toy_vocab):
        entries = read_manifest(toy_manifest)
        for name in ("a", "b"):
            run_training(entries, _toy_train_config(), tiny_config(), tmp_path / name, vocab=toy_vocab)
        for step in ("step_0000002.brst", "step_0000004.brst"):
            first = (tmp_path / "a" / "checkpoints" / step).read_bytes()
            assert first == (tmp_path / "b" / "checkpoints" / step).read_bytes()

    def test_init_params_seed_the_run(self, tmp_path, toy_manifest, toy_vocab):
        init = build_model(tiny_config(), seed=42, vocab=toy_vocab)
        result = run_training(
            read_manifest(toy_manifest),
            _toy_train_config(max_steps=1),
            tiny_config(),
            tmp_path / "run",
            vocab=toy_vocab,
            init_params=init,
        )
        assert not result.params.store.allclose(init.store)
        assert init.store.allclose(build_model(tiny_config(), seed=42, vocab=toy_vocab).store)

    def test_rejects_empty_corpus_and_vocab_mismatch(self, tmp_path, toy_manifest):
        with pytest.raises(ConfigError):
            run_training([], _toy_train_config(), tiny_config(), tmp_path / "run")
        with pytest.raises(ConfigError):
            run_training(
                read_manifest(toy_manifest),
                _toy_train_config(),
                tiny_config(vocab_size=9),
                tmp_path / "run",
                vocab=Vocabulary.synthetic(4),
            )
