from __future__ import annotations

import numpy as np
import pytest
from scipy.special import logsumexp

from brst import tensor as T
from brst.config import resolve_preset
from brst.errors import CheckpointError, ConfigError, InputError, NumericError
from brst.model import (
    ModelParams,
    Vocabulary,
    build_model,
    decode_teacher_forced,
    decoder_forward,
    decoder_step,
    encode,
    encode_batch,
    load_partial_checkpoint,
    sequence_log_prob,
    sequence_log_probs,
    subsampled_length,
)
from brst.tensor import Tape, finite_diff_check

from .conftest import random_features, tiny_config


def _unrolled_copy(shared: ModelParams) -> ModelParams:
    """A stacked model (M = S1, S1 = 1) whose blocks are copies of the single shared block."""

    cfg = shared.config
    stacked = build_model(
        cfg.updated(num_encoder_blocks=cfg.S1, encoder_repeats=1, adapters_encoder=False), seed=99
    )
    for name, tensor in stacked.store.items():
        source = name
        if name.startswith("encoder.blocks."):
            source = "encoder.blocks.0." + name.split(".", 3)[3]
        tensor.data = shared[source].data.copy()
    return stacked


class TestVocabulary:
    def test_layout(self):
        vocab = Vocabulary.from_transcripts(["ba", "ab c"])
        assert vocab.tokens == ("<blank>", "<unk>", "a", "b", "c", "<sos/eos>")
        assert (vocab.blank, vocab.unk, vocab.sos, vocab.eos) == (0, 1, 5, 5)

    def test_encode_maps_unknown_and_skips_spaces(self):
        vocab = Vocabulary.from_transcripts(["ab"])
        assert vocab.encode("a zb") == [2, 1, 3]
        assert vocab.decode([2, 0, 3, 4]) == "ab"

    def test_synthetic_sizes(self):
        assert Vocabulary.synthetic(30).size == 33
        assert Vocabulary.synthetic(4230).size == 4233

    def test_bad_layouts(self):
        with pytest.raises(ConfigError):
            Vocabulary(("<blank>", "<unk>", "<sos/eos>"))
        with pytest.raises(ConfigError):
            Vocabulary(("<unk>", "<blank>", "a", "<sos/eos>"))


class TestEncoder:
    def test_output_length_follows_subsampling(self, tiny_params):
        H = encode(tiny_params, random_features(40)).H
        assert H.shape == (subsampled_length(40), 8) == (9, 8)

    def test_block_reuse_matches_unrolled_stack(self):
        shared = build_model(tiny_config(encoder_repeats=3), seed=1)
        stacked = _unrolled_copy(shared)
        features = random_features(37, seed=2)
        reused, unrolled = encode(shared, features), encode(stacked, features)
        np.testing.assert_allclose(reused.H, unrolled.H, atol=1e-12)
        for (label_a, a), (label_b, b) in zip(reused.per_repetition, unrolled.per_repetition):
            assert label_a == label_b
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_shared_block_gradient_is_sum_over_applications(self):
        shared = build_model(tiny_config(encoder_repeats=3), seed=3)
        stacked = _unrolled_copy(shared)
        features = random_features(33, seed=4)
        weights = np.random.default_rng(5).standard_normal((1, subsampled_length(33), 8))

        def grads_of(params: ModelParams) -> dict[str, np.ndarray]:
            with Tape() as tape:
                loss = T.sum_(encode_batch(params, [features]).hidden * weights)
            by_tensor = T.backward(tape, loss, params.parameters())
            return {name: by_tensor[t] for name, t in params.store.items()}

        shared_grads, stacked_grads = grads_of(shared), grads_of(stacked)
        for name in shared.store:
            if not name.startswith("encoder.blocks.0."):
                continue
            suffix = name.split(".", 3)[3]
            total = sum(stacked_grads[f"encoder.blocks.{m}.{suffix}"] for m in range(3))
            np.testing.assert_allclose(shared_grads[name], total, atol=1e-10)

    def test_capture_labels_with_adapters(self):
        params = build_model(tiny_config(encoder_repeats=2, adapters_encoder=True), seed=0)
        labels = [label for label, _ in encode(params, random_features(30)).per_repetition]
        assert labels == ["enc-1", "enc-1-after-ADM", "enc-2", "enc-2-after-ADM"]

    def test_adapter_output_is_non_negative(self):
        params = build_model(tiny_config(adapters_encoder=True), seed=0)
        captures = dict(encode(params, random_features(30)).per_repetition)
        assert np.all(captures["enc-2-after-ADM"] >= 0.0)

    def test_padding_does_not_leak(self, tiny_params):
        short, long = random_features(25, seed=1), random_features(48, seed=2)
        batched = encode_batch(tiny_params, [short, long])
        alone = encode(tiny_params, short).H
        length = int(batched.lengths[0])
        np.testing.assert_allclose(batched.hidden.data[0, :length], alone, atol=1e-10)

    def test_too_short_or_wrong_width(self, tiny_params):
        with pytest.raises(InputError):
            encode(tiny_params, random_features(6))
        with pytest.raises(InputError):
            encode(tiny_params, np.zeros((30, 40)))

    def test_non_finite_activation_names_repetition(self):
        params = build_model(tiny_config(), seed=0)
        params["encoder.blocks.0.ff.1.bias"].data[:] = np.inf
        with pytest.raises(NumericError) as info:
            encode(params, random_features(30))
        assert info.value.repetition == 0


class TestDecoder:
    def test_step_distribution_is_normalized(self, tiny_params):
        H = encode(tiny_params, random_features(30)).H
        logp = decoder_forward(tiny_params, H, [tiny_params.vocab.sos, 2, 3])
        assert logp.shape == (7,)
        assert logsumexp(logp) == pytest.approx(0.0, abs=1e-12)

    def test_sequence_score_is_sum_of_steps(self, tiny_adapter_params):
        params = tiny_adapter_params
        H = encode(params, random_features(30)).H
        tokens, sos = [2, 4, 4], params.vocab.sos
        stepwise = sum(
            decoder_forward(params, H, [sos, *tokens[:i]])[target]
            for i, target in enumerate([*tokens, params.vocab.eos])
        )
        assert sequence_log_prob(params, H, tokens) == pytest.approx(stepwise, abs=1e-10)

    def test_batched_sequences_match_single(self, tiny_params):
        H = encode(tiny_params, random_features(30)).H
        sequences = [[2], [3, 4, 5], []]
        batched = sequence_log_probs(tiny_params, H, sequences)
        single = [sequence_log_prob(tiny_params, H, s) for s in sequences]
        np.testing.assert_allclose(batched, single, atol=1e-10)

    def test_step_batches_prefixes(self, tiny_params):
        H = encode(tiny_params, random_features(30)).H
        sos = tiny_params.vocab.sos
        rows = decoder_step(tiny_params, H, [[sos, 2], [sos, 5]])
        np.testing.assert_allclose(rows[1], decoder_forward(tiny_params, H, [sos, 5]), atol=1e-12)

    def test_prefix_must_start_with_sos(self, tiny_params):
        H = encode(tiny_params, random_features(30)).H
        with pytest.raises(InputError):
            decoder_forward(tiny_params, H, [2, 3])
        with pytest.raises(InputError):
            decoder_forward(tiny_params, H, [tiny_params.vocab.sos, 7])

    def test_changing_a_token_leaves_earlier_positions_alone(self, tiny_adapter_params):
        params = tiny_adapter_params
        sos = params.vocab.sos
        with T.no_grad():
            enc = encode_batch(params, [random_features(30)])
            a = decode_teacher_forced(params, enc.hidden, enc.mask, [[sos, 2, 3, 4]]).logprobs.data[0]
            b = decode_teacher_forced(params, enc.hidden, enc.mask, [[sos, 2, 5, 4]]).logprobs.data[0]
        np.testing.assert_allclose(a[:2], b[:2], atol=1e-12)
        assert not np.allclose(a[2], b[2])

    def test_decoder_capture_labels(self, tiny_adapter_params):
        params = tiny_adapter_params
        with T.no_grad():
            enc = encode_batch(params, [random_features(30)])
            out = decode_teacher_forced(params, enc.hidden, enc.mask, [[params.vocab.sos, 2]], capture=True)
        assert [label for label, _ in out.captures] == [
            "dec-0",
            "dec-1",
            "dec-1-after-ADM",
            "dec-2",
            "dec-2-after-ADM",
        ]


class TestEndToEndGradient:
    def test_selected_parameters_match_finite_differences(self):
        params = build_model(tiny_config(adapters_encoder=True), seed=6)
        features = random_features(29, seed=7)
        sos = params.vocab.sos

        def f():
            enc = encode_batch(params, [features])
            dec = decode_teacher_forced(params, enc.hidden, enc.mask, [[sos, 2, 3]])
            return T.sum_(dec.logprobs[0, np.arange(3), np.array([2, 3, sos])])

        chosen = [
            params["encoder.blocks.0.norm1.gain"],
            params["encoder.adapters.1.bias"],
            params["decoder.blocks.0.src_attn.q.bias"],
            params["decoder.output.bias"],
        ]
        assert finite_diff_check(f, chosen) < 1e-6


class TestWarmStart:
    def test_adapters_start_fresh_and_rest_is_copied(self):
        source = build_model(tiny_config(), seed=10)
        target = build_model(tiny_config(adapters_encoder=True), seed=11)
        merged, provenance = load_partial_checkpoint(target, source)
        assert provenance.fresh == ["encoder.adapters.0", "encoder.adapters.1"]
        assert provenance.dropped == []
        for name in source.store:
            np.testing.assert_array_equal(merged[name].data, source[name].data)
        np.testing.assert_array_equal(
            merged["encoder.adapters.0.weight"].data, target["encoder.adapters.0.weight"].data
        )

    def test_removing_adapters_drops_them(self):
        source = build_model(tiny_config(adapters_decoder=True), seed=10)
        _, provenance = load_partial_checkpoint(build_model(tiny_config(), seed=11), source)
        assert provenance.dropped == ["decoder.adapters.0"]

    def test_stacked_to_shared_is_rejected(self):
        source = build_model(tiny_config(num_encoder_blocks=2, encoder_repeats=1), seed=0)
        with pytest.raises(CheckpointError) as info:
            load_partial_checkpoint(build_model(tiny_config(), seed=1), source)
        assert info.value.component == "encoder.blocks"

    def test_width_mismatch_names_component(self):
        source = build_model(tiny_config(ff_dim=32), seed=0)
        with pytest.raises(CheckpointError) as info:
            load_partial_checkpoint(build_model(tiny_config(), seed=1), source)
        assert info.value.component == "encoder.blocks.0"

    def test_full_scale_br_into_bra_e_has_twelve_fresh_adapters(self):
        source = build_model(resolve_preset("BR", "full", dtype="float32"), seed=0)
        target = build_model(resolve_preset("BRA-E", "full", dtype="float32"), seed=1)
        merged, provenance = load_partial_checkpoint(target, source)
        assert set(provenance.fresh) == {f"encoder.adapters.{r}" for r in range(12)}
        assert len(provenance.fresh) == 12
        assert provenance.dropped == []
        np.testing.assert_array_equal(merged["ctc.weight"].data, source["ctc.weight"].data)
