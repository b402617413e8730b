from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from .config import SpecAugmentConfig
from .errors import CorpusError, InputError, ResampleNotSupportedError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FRAME_WIDTH_MS = 25
FRAME_SHIFT_MS = 10
WINDOW_SAMPLES = SAMPLE_RATE * FRAME_WIDTH_MS // 1000
SHIFT_SAMPLES = SAMPLE_RATE * FRAME_SHIFT_MS // 1000
NUM_MEL_BINS = 80
FFT_SIZE = 512
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10
CMVN_VARIANCE_FLOOR = 1e-8

FBNK_MAGIC = b"FBNK"
_FBNK_HEADER = np.dtype([("magic", "S4"), ("frames", "<u4"), ("dims", "<u4")])


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        if np.ndim(self.samples) != 1:
            raise InputError("only mono audio is supported")


@dataclass(frozen=True)
class FeatureMatrix:
    """T x 80 log-Mel frames at 25 ms width / 10 ms shift."""

    frames: np.ndarray
    frame_shift_ms: int = FRAME_SHIFT_MS
    frame_width_ms: int = FRAME_WIDTH_MS

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise InputError(f"features must be a non-empty T x D matrix, got {frames.shape}")
        if frames.shape[1] != NUM_MEL_BINS:
            raise InputError(f"features must have {NUM_MEL_BINS} bins, got {frames.shape[1]}")
        if not np.all(np.isfinite(frames)):
            raise InputError("features contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int) -> int:
    return 1 + (num_samples - WINDOW_SAMPLES) // SHIFT_SAMPLES


def _hz_to_mel(hz: np.ndarray | float) -> np.ndarray:
    return 1127.0 * np.log1p(np.asarray(hz) / 700.0)


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    return 700.0 * np.expm1(mel / 1127.0)


@lru_cache(maxsize=4)
def mel_filterbank(
    num_bins: int = NUM_MEL_BINS,
    fft_size: int = FFT_SIZE,
    sample_rate: int = SAMPLE_RATE,
    low_hz: float = 0.0,
    high_hz: float = 8000.0,
) -> np.ndarray:
    """Triangular filters on the mel scale, shape (num_bins, fft_size // 2 + 1)."""

    edges = _mel_to_hz(np.linspace(_hz_to_mel(low_hz), _hz_to_mel(high_hz), num_bins + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    return weights


def compute_fbank(waveform: Waveform) -> FeatureMatrix:
    """80-bin log-Mel filterbank with pre-emphasis, Hann window and a 512-point FFT."""

    if waveform.sample_rate != SAMPLE_RATE:
        raise ResampleNotSupportedError(
            f"expected {SAMPLE_RATE} Hz audio, got {waveform.sample_rate} Hz; resampling is not supported"
        )
    samples = np.asarray(waveform.samples, dtype=np.float64)
    if samples.shape[0] < WINDOW_SAMPLES:
        raise InputError(
            f"audio has {samples.shape[0]} samples, shorter than one {WINDOW_SAMPLES}-sample window"
        )
    frames = sliding_window_view(samples, WINDOW_SAMPLES)[::SHIFT_SAMPLES].copy()
    frames[:, 1:] -= PREEMPHASIS * frames[:, :-1].copy()
    frames[:, 0] *= 1.0 - PREEMPHASIS
    frames *= np.hanning(WINDOW_SAMPLES)
    power = np.abs(np.fft.rfft(frames, n=FFT_SIZE, axis=1)) ** 2
    energies = power @ mel_filterbank().T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)))


def apply_cmvn(features: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance, per-bin mean and variance normalization."""

    frames = features.frames
    centered = frames - frames.mean(axis=0, keepdims=True)
    variance = np.maximum(np.mean(centered * centered, axis=0, keepdims=True), CMVN_VARIANCE_FLOOR)
    return FeatureMatrix(
        centered / np.sqrt(variance),
        frame_shift_ms=features.frame_shift_ms,
        frame_width_ms=features.frame_width_ms,
    )


def spec_augment(
    features: FeatureMatrix,
    cfg: SpecAugmentConfig,
    rng: np.random.Generator | None = None,
) -> FeatureMatrix:
    """Frequency and time masks filled with the utterance mean."""

    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    frames = features.frames.copy()
    num_frames_, num_bins = frames.shape
    fill = features.frames.mean()
    for _ in range(cfg.num_freq_masks):
        width = min(int(rng.integers(0, cfg.max_freq_bins + 1)), num_bins)
        start = int(rng.integers(0, num_bins - width + 1))
        frames[:, start : start + width] = fill
    for _ in range(cfg.num_time_masks):
        width = min(int(rng.integers(0, cfg.max_time_frames + 1)), num_frames_)
        start = int(rng.integers(0, num_frames_ - width + 1))
        frames[start : start + width, :] = fill
    return FeatureMatrix(
        frames,
        frame_shift_ms=features.frame_shift_ms,
        frame_width_ms=features.frame_width_ms,
    )


def read_wav(path: Path) -> Waveform:
    """16-bit PCM mono RIFF file, promoted to float without rescaling."""

    sample_rate, data = wavfile.read(path)
    if data.dtype != np.int16:
        raise InputError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    return Waveform(samples=data.astype(np.float64), sample_rate=int(sample_rate))


def write_fbnk(path: Path, frames: np.ndarray) -> None:
    """Header {"FBNK", u32 T, u32 D} followed by T x D little-endian float32, row-major."""

    frames = np.asarray(frames)
    header = np.array([(FBNK_MAGIC, frames.shape[0], frames.shape[1])], dtype=_FBNK_HEADER)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(header.tobytes())
        handle.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_fbnk(path: Path) -> FeatureMatrix:
    raw = path.read_bytes()
    if len(raw) < _FBNK_HEADER.itemsize:
        raise InputError(f"{path}: too short for an FBNK header")
    header = np.frombuffer(raw[: _FBNK_HEADER.itemsize], dtype=_FBNK_HEADER)[0]
    if header["magic"] != FBNK_MAGIC:
        raise InputError(f"{path}: bad magic {header['magic']!r}")
    frames, dims = int(header["frames"]), int(header["dims"])
    body = raw[_FBNK_HEADER.itemsize :]
    if len(body) != frames * dims * 4:
        raise InputError(f"{path}: expected {frames}x{dims} floats, got {len(body)} bytes")
    data = np.frombuffer(body, dtype="<f4").reshape(frames, dims).astype(np.float64)
    return FeatureMatrix(data)


def load_features(utt_id: str, path: Path) -> FeatureMatrix:
    """Resolve one manifest path (.wav audio or .fbnk features) to a FeatureMatrix."""

    try:
        if path.suffix.lower() == ".wav":
            return compute_fbank(read_wav(path))
        return read_fbnk(path)
    except (OSError, ValueError) as exc:
        raise CorpusError(f"{utt_id}: cannot load {path}: {exc}", utt_id=utt_id) from exc


__all__ = [
    "SAMPLE_RATE",
    "NUM_MEL_BINS",
    "LOG_FLOOR",
    "Waveform",
    "FeatureMatrix",
    "num_frames",
    "mel_filterbank",
    "compute_fbank",
    "apply_cmvn",
    "spec_augment",
    "read_wav",
    "write_fbnk",
    "read_fbnk",
    "load_features",
]
