from __future__ import annotations

import numpy as np
import pytest
from scipy.io import wavfile

from brst.config import SpecAugmentConfig
from brst.errors import CorpusError, InputError, ResampleNotSupportedError
from brst.features import (
    NUM_MEL_BINS,
    FeatureMatrix,
    Waveform,
    apply_cmvn,
    compute_fbank,
    load_features,
    mel_filterbank,
    num_frames,
    read_fbnk,
    read_wav,
    spec_augment,
    write_fbnk,
)


def _tone(seconds: float = 0.5, hz: float = 440.0) -> np.ndarray:
    t = np.arange(int(16000 * seconds)) / 16000.0
    return (3000.0 * np.sin(2.0 * np.pi * hz * t)).astype(np.float64)


class TestFilterbank:
    def test_frame_count(self):
        assert num_frames(400) == 1
        assert num_frames(16000) == 98
        fbank = compute_fbank(Waveform(_tone(1.0)))
        assert fbank.frames.shape == (98, NUM_MEL_BINS)

    def test_silence_hits_log_floor(self):
        fbank = compute_fbank(Waveform(np.zeros(800)))
        np.testing.assert_allclose(fbank.frames, np.log(1e-10))

    def test_tone_energy_lands_near_its_bin(self):
        frames = compute_fbank(Waveform(_tone(hz=1000.0))).frames
        peak = int(np.argmax(frames.mean(axis=0)))
        centers = mel_filterbank().argmax(axis=1) * 16000 / 512
        assert abs(centers[peak] - 1000.0) < 150.0

    def test_filters_are_non_negative(self):
        weights = mel_filterbank()
        assert weights.shape == (NUM_MEL_BINS, 257)
        assert np.all(weights >= 0.0)
        assert np.all(weights.sum(axis=1) > 0.0)

    def test_other_sample_rates_are_refused(self):
        with pytest.raises(ResampleNotSupportedError):
            compute_fbank(Waveform(_tone(), sample_rate=8000))

    def test_shorter_than_one_window(self):
        with pytest.raises(InputError):
            compute_fbank(Waveform(np.zeros(399)))


class TestNormalization:
    def test_cmvn_zero_mean_unit_variance(self):
        frames = np.random.default_rng(0).normal(5.0, 3.0, size=(50, NUM_MEL_BINS))
        normalized = apply_cmvn(FeatureMatrix(frames)).frames
        np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(normalized.std(axis=0), 1.0, atol=1e-9)

    def test_constant_bins_stay_finite(self):
        normalized = apply_cmvn(FeatureMatrix(np.ones((10, NUM_MEL_BINS)))).frames
        np.testing.assert_array_equal(normalized, 0.0)

    def test_feature_matrix_validation(self):
        with pytest.raises(InputError):
            FeatureMatrix(np.zeros((4, 40)))
        with pytest.raises(InputError):
            FeatureMatrix(np.full((4, NUM_MEL_BINS), np.nan))


class TestSpecAugment:
    def test_masks_use_utterance_mean_and_keep_shape(self):
        frames = np.random.default_rng(1).standard_normal((60, NUM_MEL_BINS))
        cfg = SpecAugmentConfig(num_freq_masks=2, max_freq_bins=10, num_time_masks=2, max_time_frames=5)
        masked = spec_augment(FeatureMatrix(frames), cfg, np.random.default_rng(7)).frames
        assert masked.shape == frames.shape
        changed = masked != frames
        np.testing.assert_allclose(masked[changed], frames.mean())

    def test_deterministic_per_generator_seed(self):
        frames = np.random.default_rng(2).standard_normal((30, NUM_MEL_BINS))
        cfg = SpecAugmentConfig()
        first = spec_augment(FeatureMatrix(frames), cfg, np.random.default_rng(4)).frames
        second = spec_augment(FeatureMatrix(frames), cfg, np.random.default_rng(4)).frames
        np.testing.assert_array_equal(first, second)

    def test_disabled_masks_are_identity(self):
        frames = np.random.default_rng(3).standard_normal((30, NUM_MEL_BINS))
        cfg = SpecAugmentConfig(num_freq_masks=0, num_time_masks=0)
        np.testing.assert_array_equal(spec_augment(FeatureMatrix(frames), cfg).frames, frames)


class TestFiles:
    def test_fbnk_stores_float32(self, tmp_path):
        frames = np.random.default_rng(5).standard_normal((7, NUM_MEL_BINS))
        path = tmp_path / "utt.fbnk"
        write_fbnk(path, frames)
        assert path.stat().st_size == 12 + 7 * NUM_MEL_BINS * 4
        np.testing.assert_allclose(read_fbnk(path).frames, frames.astype(np.float32))

    def test_truncated_fbnk(self, tmp_path):
        path = tmp_path / "utt.fbnk"
        write_fbnk(path, np.zeros((3, NUM_MEL_BINS)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(InputError):
            read_fbnk(path)
        with pytest.raises(CorpusError) as info:
            load_features("utt", path)
        assert info.value.utt_id == "utt"

    def test_wav_round_through_fbank(self, tmp_path):
        path = tmp_path / "tone.wav"
        wavfile.write(path, 16000, _tone(0.3).astype(np.int16))
        waveform = read_wav(path)
        assert waveform.sample_rate == 16000
        assert load_features("tone", path).frames.shape == (num_frames(4800), NUM_MEL_BINS)

    def test_stereo_wav_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        wavfile.write(path, 16000, np.zeros((800, 2), dtype=np.int16))
        with pytest.raises(InputError):
            read_wav(path)
