"""Attention beam search, attention rescoring, the four decoding modes and CER scoring."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .config import DecodeSettings
from .corpus import ManifestEntry, Utterance
from .ctc import ctc_greedy, ctc_prefix_beam
from .errors import InputError
from .hypothesis import Hypothesis, NBestList, rank_key
from .model import ModelParams, ctc_head, decoder_step, encode, sequence_log_probs

logger = logging.getLogger(__name__)


# Attention decoding ---------------------------------------------------------------


def attention_beam_search(
    params: ModelParams,
    H: np.ndarray,
    beam_size: int,
    max_len: int | None = None,
    length_penalty: float = 0.0,
) -> NBestList:
    """Length-synchronous beam search over the attention decoder.

    Scores are raw sums of per-step log-probabilities plus ``length_penalty``
    per emitted token (eos included). The blank unit is never emitted.
    Hypotheses that emit eos are frozen; the search stops when ``beam_size``
    of them outrank every running hypothesis or after ``max_len`` steps.
    """

    if beam_size < 1:
        raise InputError(f"beam_size must be >= 1, got {beam_size}")
    max_len = max_len if max_len is not None else max(1, int(np.shape(H)[0]))
    if max_len < 1:
        raise InputError(f"max_len must be >= 1, got {max_len}")
    vocab = params.vocab
    sos, eos, blank = vocab.sos, vocab.eos, vocab.blank

    running: list[Hypothesis] = [Hypothesis(tokens=(), score=0.0, log_prob_att=0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        logp = decoder_step(params, H, [[sos, *hyp.tokens] for hyp in running])
        logp[:, blank] = -np.inf
        totals = np.array([hyp.score for hyp in running])[:, None] + logp + length_penalty
        flat = totals.reshape(-1)
        keep = min(beam_size, flat.size)
        threshold = np.partition(flat, flat.size - keep)[flat.size - keep]
        rows, cols = np.nonzero(totals >= threshold)
        candidates = []
        for row, col in zip(rows.tolist(), cols.tolist()):
            if not np.isfinite(totals[row, col]):
                continue
            parent = running[row]
            tokens = parent.tokens if col == eos else (*parent.tokens, col)
            candidates.append((float(totals[row, col]), col == eos, tokens))
        candidates.sort(key=lambda c: (-c[0], c[2], c[1]))
        running = []
        for score, ended, tokens in candidates[:keep]:
            hyp = Hypothesis(tokens=tokens, score=score, log_prob_att=score)
            (finished if ended else running).append(hyp)
        if not running:
            break
        if length_penalty <= 0.0 and len(finished) >= beam_size:
            kth = sorted(finished, key=rank_key)[beam_size - 1].score
            if max(h.score for h in running) < kth:
                break

    if finished:
        return NBestList(finished, beam_size=beam_size)
    logger.warning("No hypothesis reached eos within %d steps; returning partial hypotheses", max_len)
    partial = [
        Hypothesis(tokens=h.tokens, score=h.score, log_prob_att=h.log_prob_att, partial=True)
        for h in running
    ]
    return NBestList(partial, beam_size=beam_size, truncated=True)


def attention_rescore(
    params: ModelParams, H: np.ndarray, ctc_nbest: NBestList, weight: float
) -> Hypothesis:
    """Re-rank CTC hypotheses by weight * log p_ctc + (1 - weight) * log p_att."""

    if not 0.0 <= weight <= 1.0:
        raise InputError(f"rescore weight must lie in [0, 1], got {weight}")
    if len(ctc_nbest) == 0:
        raise InputError("attention rescoring needs a non-empty n-best list")
    att_scores = sequence_log_probs(params, H, [list(h.tokens) for h in ctc_nbest])
    rescored = [hyp.rescored(float(att), weight) for hyp, att in zip(ctc_nbest, att_scores)]
    return min(rescored, key=rank_key)


# CER ------------------------------------------------------------------------------


@dataclass(frozen=True)
class CERResult:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    cer: float
    degenerate: bool = False

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def compute_cer(reference: Sequence[Hashable], hypothesis: Sequence[Hashable]) -> CERResult:
    """Unit-cost Levenshtein alignment with an S/I/D breakdown.

    An empty reference yields insertions only, divided by 1 and flagged
    ``degenerate``.
    """

    ref, hyp = list(reference), list(hypothesis)
    rows, cols = len(ref) + 1, len(hyp) + 1
    dist = np.zeros((rows, cols), dtype=np.int64)
    dist[:, 0] = np.arange(rows)
    dist[0, :] = np.arange(cols)
    for i in range(1, rows):
        for j in range(1, cols):
            diagonal = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(diagonal, dist[i - 1, j] + 1, dist[i, j - 1] + 1)

    subs = ins = dels = 0
    i, j = len(ref), len(hyp)
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    errors = subs + ins + dels
    if not ref:
        return CERResult(0, ins, 0, 0, float(ins), degenerate=True)
    return CERResult(subs, ins, dels, len(ref), errors / len(ref))


# Utterance and corpus decoding ---------------------------------------------------------


@dataclass(frozen=True)
class DecodeResult:
    utt_id: str
    text: str
    score: float
    tokens: tuple[int, ...]
    partial: bool = False


def decode_utterance(params: ModelParams, features: np.ndarray, settings: DecodeSettings) -> Hypothesis:
    """Dispatch one utterance to cg / cp / att / att-re decoding."""

    H = encode(params, features).H
    logprobs = ctc_head(params, H).data
    blank = params.vocab.blank
    if settings.method == "cg":
        tokens = ctc_greedy(logprobs, blank)
        best_path = float(np.max(logprobs, axis=1).sum())
        return Hypothesis(tokens=tuple(tokens), score=best_path, log_prob_ctc=best_path)
    if settings.method == "cp":
        return ctc_prefix_beam(logprobs, settings.beam_size, blank).best
    if settings.method == "att":
        nbest = attention_beam_search(
            params, H, settings.beam_size, settings.max_len, settings.length_penalty
        )
        return nbest.best
    # Weight 1 reproduces "cp" whenever ctc_nbest_size <= beam_size.
    nbest = ctc_prefix_beam(logprobs, max(settings.beam_size, settings.ctc_nbest_size), blank)
    nbest = NBestList(list(nbest), beam_size=settings.ctc_nbest_size)
    return attention_rescore(params, H, nbest, settings.rescore_weight)


def decode_corpus(
    params: ModelParams,
    utterances: Sequence[Utterance],
    settings: DecodeSettings,
    threads: int = 1,
) -> list[DecodeResult]:
    def run(utt: Utterance) -> DecodeResult:
        hyp = decode_utterance(params, utt.features, settings)
        return DecodeResult(
            utt_id=utt.utt_id,
            text=params.vocab.decode(hyp.tokens),
            score=hyp.score,
            tokens=hyp.tokens,
            partial=hyp.partial,
        )

    if threads <= 1:
        return [run(utt) for utt in utterances]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, utterances))


# Files ------------------------------------------------------------------------------


def write_hypotheses(path: Path, results: Sequence[DecodeResult]) -> None:
    """One ``utt_id<TAB>hypothesis<TAB>score`` line per utterance."""

    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{r.utt_id}\t{r.text}\t{r.score!r}\n" for r in results]
    path.write_text("".join(lines), encoding="utf-8")


def read_hypotheses(path: Path) -> dict[str, str]:
    hypotheses: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise InputError(f"{path}:{lineno}: expected utt_id, hypothesis and score")
        hypotheses[parts[0]] = parts[1]
    return hypotheses


@dataclass(frozen=True)
class CorpusCER:
    rows: list[tuple[str, CERResult]]

    @property
    def errors(self) -> int:
        return sum(r.errors for _, r in self.rows)

    @property
    def ref_len(self) -> int:
        return sum(r.ref_len for _, r in self.rows)

    @property
    def cer(self) -> float:
        return self.errors / max(1, self.ref_len)


def score_corpus(references: dict[str, str], hypotheses: dict[str, str]) -> CorpusCER:
    rows = []
    for utt_id, reference in references.items():
        ref = [ch for ch in reference if not ch.isspace()]
        hyp = [ch for ch in hypotheses.get(utt_id, "") if not ch.isspace()]
        result = compute_cer(ref, hyp)
        if result.degenerate:
            logger.warning("%s has an empty reference; CER counts insertions only", utt_id)
        rows.append((utt_id, result))
    return CorpusCER(rows)


def write_cer_csv(path: Path, corpus: CorpusCER) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["utt_id", "S", "I", "D", "ref_len", "cer"])
        for utt_id, r in corpus.rows:
            writer.writerow([utt_id, r.substitutions, r.insertions, r.deletions, r.ref_len, f"{r.cer:.6f}"])


def evaluate(hypothesis_path: Path, entries: Sequence[ManifestEntry], out_csv: Path) -> CorpusCER:
    """Score a hypothesis file against manifest transcripts and write the CER CSV."""

    hypotheses = read_hypotheses(hypothesis_path)
    references = {e.utt_id: e.transcript for e in entries}
    missing = [utt for utt in references if utt not in hypotheses]
    if missing:
        logger.warning("%d utterances have no hypothesis (first: %s)", len(missing), missing[0])
    corpus = score_corpus(references, hypotheses)
    write_cer_csv(out_csv, corpus)
    return corpus


__all__ = [
    "attention_beam_search",
    "attention_rescore",
    "CERResult",
    "compute_cer",
    "DecodeResult",
    "decode_utterance",
    "decode_corpus",
    "write_hypotheses",
    "read_hypotheses",
    "CorpusCER",
    "score_corpus",
    "write_cer_csv",
    "evaluate",
]
