from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ToyCorpusSpec
from .ctc import ctc_min_frames
from .errors import ConfigError, CorpusError
from .features import NUM_MEL_BINS, apply_cmvn, load_features, write_fbnk
from .model import SYNTHETIC_BASE, Vocabulary, subsampled_length

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
AUDIO_SUFFIXES = (".wav",)
FEATURE_SUFFIXES = (".fbnk",)


@dataclass(frozen=True)
class ManifestEntry:
    """One utterance: id, audio (.wav) or feature (.fbnk) path, transcript."""

    utt_id: str
    path: Path
    transcript: str

    @property
    def is_audio(self) -> bool:
        return self.path.suffix.lower() in AUDIO_SUFFIXES


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    tokens: list[int]
    transcript: str


def read_manifest(path: Path) -> list[ManifestEntry]:
    """Parse a UTF-8 ``utt_id<TAB>path<TAB>transcript`` manifest.

    Relative paths resolve against the manifest's directory.
    """

    if not path.is_file():
        raise ConfigError(f"Manifest {path} does not exist.")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8", newline="") as handle:
        for lineno, row in enumerate(csv.reader(handle, delimiter="\t", quoting=csv.QUOTE_NONE), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) == 2:
                row = [*row, ""]
            if len(row) != 3:
                raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(row)}")
            utt_id, raw_path, transcript = (field.strip() for field in row)
            if utt_id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate utterance id {utt_id}", utt_id=utt_id)
            suffix = Path(raw_path).suffix.lower()
            if suffix not in AUDIO_SUFFIXES + FEATURE_SUFFIXES:
                raise CorpusError(
                    f"{path}:{lineno}: {raw_path} is neither audio (.wav) nor features (.fbnk)",
                    utt_id=utt_id,
                )
            seen.add(utt_id)
            resolved = Path(raw_path) if Path(raw_path).is_absolute() else path.parent / raw_path
            entries.append(ManifestEntry(utt_id=utt_id, path=resolved, transcript=transcript))
    return entries


def write_manifest(path: Path, entries: Iterable[ManifestEntry]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in entries:
        try:
            shown = entry.path.relative_to(path.parent)
        except ValueError:
            shown = entry.path
        lines.append(f"{entry.utt_id}\t{shown.as_posix()}\t{entry.transcript}\n")
    path.write_text("".join(lines), encoding="utf-8")


def load_utterance(entry: ManifestEntry, vocab: Vocabulary, cmvn: bool = True) -> Utterance:
    features = load_features(entry.utt_id, entry.path)
    if cmvn:
        features = apply_cmvn(features)
    return Utterance(
        utt_id=entry.utt_id,
        features=features.frames,
        tokens=vocab.encode(entry.transcript),
        transcript=entry.transcript,
    )


def load_utterances(
    entries: Sequence[ManifestEntry], vocab: Vocabulary, cmvn: bool = True, threads: int = 1
) -> list[Utterance]:
    """Load every entry, fanning feature extraction out over ``threads`` workers."""

    if threads <= 1:
        return [load_utterance(entry, vocab, cmvn) for entry in entries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda entry: load_utterance(entry, vocab, cmvn), entries))


def generate_toy_corpus(spec: ToyCorpusSpec, out_dir: Path) -> Path:
    """Write a synthetic FBNK corpus plus manifest; returns the manifest path.

    Token ``i`` is the character ``U+4E00 + i`` and emits a fixed random
    template of ``template_frames`` frames. Utterances are framed by silence
    so every transcript stays reachable by CTC after x4 subsampling.
    """

    if spec.num_bins != NUM_MEL_BINS:
        raise ConfigError(f"toy corpus features must have {NUM_MEL_BINS} bins, got {spec.num_bins}")
    rng = np.random.default_rng(spec.seed)
    templates = rng.normal(size=(spec.vocab_size, spec.template_frames, spec.num_bins))
    silence = np.zeros((spec.silence_frames, spec.num_bins))
    feats_dir = out_dir / "feats"
    feats_dir.mkdir(parents=True, exist_ok=True)

    entries: list[ManifestEntry] = []
    for index in range(spec.num_utterances):
        length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = rng.integers(0, spec.vocab_size, size=length)
        frames = np.concatenate([silence, *templates[tokens], silence])
        frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
        if subsampled_length(frames.shape[0]) < ctc_min_frames(tokens.tolist()):
            raise CorpusError(f"utterance {index} is not reachable after subsampling")
        utt_id = f"toy{index:05d}"
        feature_path = feats_dir / f"{utt_id}.fbnk"
        write_fbnk(feature_path, frames)
        transcript = "".join(chr(SYNTHETIC_BASE + int(t)) for t in tokens)
        entries.append(ManifestEntry(utt_id=utt_id, path=feature_path, transcript=transcript))

    manifest = out_dir / MANIFEST_NAME
    write_manifest(manifest, entries)
    logger.info("Wrote %d toy utterances to %s", len(entries), out_dir)
    return manifest


__all__ = [
    "MANIFEST_NAME",
    "ManifestEntry",
    "Utterance",
    "read_manifest",
    "write_manifest",
    "load_utterance",
    "load_utterances",
    "generate_toy_corpus",
]
