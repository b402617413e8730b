from __future__ import annotations

import numpy as np
import pytest

from brst.config import ToyCorpusSpec
from brst.corpus import ManifestEntry, generate_toy_corpus, load_utterances, read_manifest, write_manifest
from brst.ctc import ctc_min_frames
from brst.errors import ConfigError, CorpusError
from brst.model import Vocabulary, subsampled_length


class TestManifest:
    def test_relative_paths_resolve_against_the_manifest(self, tmp_path):
        path = tmp_path / "data" / "manifest.tsv"
        path.parent.mkdir()
        path.write_text("u1\tfeats/u1.fbnk\tab\nu2\t/abs/u2.wav\t\n\n", encoding="utf-8")
        entries = read_manifest(path)
        assert entries[0] == ManifestEntry("u1", tmp_path / "data" / "feats" / "u1.fbnk", "ab")
        assert entries[1].path.as_posix() == "/abs/u2.wav"
        assert entries[1].is_audio and not entries[0].is_audio
        assert entries[1].transcript == ""

    def test_write_then_read(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        entries = [ManifestEntry("a", tmp_path / "f" / "a.fbnk", "xy"), ManifestEntry("b", tmp_path / "b.wav", "z")]
        write_manifest(path, entries)
        assert "a\tf/a.fbnk\txy" in path.read_text(encoding="utf-8")
        assert read_manifest(path) == entries

    @pytest.mark.parametrize(
        "content",
        ["u1\ta.fbnk\tx\nu1\tb.fbnk\ty\n", "u1\ta.mp3\tx\n", "u1\ta.fbnk\tx\textra\n"],
    )
    def test_bad_rows(self, tmp_path, content):
        path = tmp_path / "manifest.tsv"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(CorpusError):
            read_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            read_manifest(tmp_path / "absent.tsv")

    def test_missing_feature_file_names_the_utterance(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("gone\tgone.fbnk\tx\n", encoding="utf-8")
        with pytest.raises(CorpusError) as info:
            load_utterances(read_manifest(path), Vocabulary.from_transcripts(["x"]))
        assert info.value.utt_id == "gone"


class TestToyCorpus:
    def test_every_transcript_is_reachable(self, tmp_path):
        spec = ToyCorpusSpec(num_utterances=20, vocab_size=5, seed=1)
        manifest = generate_toy_corpus(spec, tmp_path)
        vocab = Vocabulary.synthetic(5)
        utterances = load_utterances(read_manifest(manifest), vocab, cmvn=False)
        assert len(utterances) == 20
        for utt in utterances:
            assert spec.min_tokens <= len(utt.tokens) <= spec.max_tokens
            assert vocab.unk not in utt.tokens
            assert subsampled_length(utt.features.shape[0]) >= ctc_min_frames(utt.tokens)

    def test_same_seed_same_corpus(self, tmp_path):
        spec = ToyCorpusSpec(num_utterances=3, vocab_size=4, seed=8)
        first = generate_toy_corpus(spec, tmp_path / "a")
        second = generate_toy_corpus(spec, tmp_path / "b")
        assert first.read_text(encoding="utf-8") == second.read_text(encoding="utf-8")
        for name in ("toy00000.fbnk", "toy00002.fbnk"):
            assert (tmp_path / "a" / "feats" / name).read_bytes() == (tmp_path / "b" / "feats" / name).read_bytes()

    def test_cmvn_is_applied_on_load(self, toy_manifest, toy_vocab):
        utt = load_utterances(read_manifest(toy_manifest), toy_vocab, cmvn=True, threads=2)[0]
        np.testing.assert_allclose(utt.features.mean(axis=0), 0.0, atol=1e-9)

    def test_feature_width_must_match(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_toy_corpus(ToyCorpusSpec(num_bins=40), tmp_path)
