"""Connectionist temporal classification: loss, greedy and prefix beam decoding.

All probability arithmetic happens in the log domain with ``-inf`` as the
zero sentinel. Targets are expanded with blanks (``b y1 b y2 ... b``) and the
trellis runs over that expanded sequence.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import InfeasibleTargetError, InputError
from .hypothesis import Hypothesis, NBestList, rank_key
from .tensor import Tensor, record

logger = logging.getLogger(__name__)

NEG_INF = -np.inf


def ctc_min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""

    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def expand_target(target: Sequence[int], blank: int = 0) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


@dataclass(frozen=True)
class CTCTrellis:
    """Log-domain forward and backward variables over the expanded target.

    ``beta[t, s]`` includes the emission at frame ``t``, so
    ``alpha + beta - logprobs[t, ext[s]]`` is the log mass of paths through
    ``(t, s)``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    expanded: np.ndarray
    log_likelihood: float
    log_likelihood_backward: float


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    allowed = np.zeros(ext.shape[0], dtype=bool)
    allowed[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allowed


def ctc_trellis(logprobs: np.ndarray, target: Sequence[int], blank: int = 0) -> CTCTrellis:
    logprobs = np.asarray(logprobs, dtype=np.float64)
    frames = logprobs.shape[0]
    ext = expand_target(target, blank)
    states = ext.shape[0]
    emit = logprobs[:, ext]
    skip = _skip_allowed(ext, blank)

    alpha = np.full((frames, states), NEG_INF)
    beta = np.full((frames, states), NEG_INF)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha[0, 0] = emit[0, 0]
        if states > 1:
            alpha[0, 1] = emit[0, 1]
        for t in range(1, frames):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = np.logaddexp(acc[1:], prev[:-1])
            acc[skip] = np.logaddexp(acc[skip], prev[np.flatnonzero(skip) - 2])
            alpha[t] = acc + emit[t]

        beta[-1, -1] = emit[-1, -1]
        if states > 1:
            beta[-1, -2] = emit[-1, -2]
        skip_from = np.zeros(states, dtype=bool)
        skip_from[:-2] = skip[2:]
        for t in range(frames - 2, -1, -1):
            nxt = beta[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            acc[skip_from] = np.logaddexp(acc[skip_from], nxt[np.flatnonzero(skip_from) + 2])
            beta[t] = acc + emit[t]

        forward = float(logsumexp(alpha[-1, -2:])) if states > 1 else float(alpha[-1, -1])
        backward = float(logsumexp(beta[0, :2])) if states > 1 else float(beta[0, 0])
    return CTCTrellis(alpha, beta, ext, forward, backward)


def _validate_target(logprobs: np.ndarray, target: Sequence[int], blank: int) -> None:
    vocab = logprobs.shape[1]
    for token in target:
        if token == blank:
            raise InputError("CTC targets must not contain the blank symbol")
        if not 0 <= token < vocab:
            raise InputError(f"target id {token} is outside [0, {vocab})")
    needed = ctc_min_frames(target)
    if logprobs.shape[0] < needed:
        raise InfeasibleTargetError(
            f"target of length {len(target)} needs at least {needed} frames, got {logprobs.shape[0]}"
        )


def ctc_loss(logprobs: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """Negative log-likelihood of ``target`` summed over all CTC alignments.

    ``logprobs`` is an L x V matrix of per-frame log-probabilities. The
    gradient flows back to ``logprobs`` through the tape.
    """

    if logprobs.ndim != 2:
        raise InputError(f"ctc_loss expects an L x V matrix, got {logprobs.shape}")
    target = [int(t) for t in target]
    _validate_target(logprobs.data, target, blank)
    trellis = ctc_trellis(logprobs.data, target, blank)
    total = trellis.log_likelihood
    if not np.isfinite(total):
        raise InfeasibleTargetError("target has zero probability under the given log-probabilities")
    ext = trellis.expanded

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        emit = logprobs.data[:, ext]
        with np.errstate(invalid="ignore"):
            through = trellis.alpha + trellis.beta - emit
        through = np.where(np.isfinite(through), through, NEG_INF)
        occupancy = np.exp(through - total)
        grad = np.zeros_like(logprobs.data)
        np.add.at(grad, (slice(None), ext), occupancy)
        return (-float(g) * grad,)

    data = np.asarray(-total, dtype=logprobs.dtype)
    return record("ctc_loss", (logprobs,), data, adjoint)


def ctc_greedy(logprobs: np.ndarray, blank: int = 0) -> list[int]:
    """Best path: per-frame argmax (lowest index on ties), collapse repeats, drop blanks."""

    best = np.argmax(np.asarray(logprobs), axis=1)
    tokens: list[int] = []
    previous = None
    for token in best.tolist():
        if token != previous and token != blank:
            tokens.append(token)
        previous = token
    return tokens


def ctc_prefix_beam(logprobs: np.ndarray, beam_size: int, blank: int = 0) -> NBestList:
    """Prefix beam search tracking blank- and non-blank-ending mass per prefix.

    Every vocabulary entry is expanded at every frame; only whole prefixes are
    pruned, to ``beam_size`` after each frame.
    """

    if beam_size < 1:
        raise InputError(f"beam_size must be >= 1, got {beam_size}")
    rows = np.asarray(logprobs, dtype=np.float64)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for row in rows.tolist():
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (p_blank, p_nonblank) in beams.items():
            p_total = np.logaddexp(p_blank, p_nonblank)
            last = prefix[-1] if prefix else None
            for token, p in enumerate(row):
                if token == blank:
                    cell = nxt[prefix]
                    cell[0] = np.logaddexp(cell[0], p_total + p)
                    continue
                extended = nxt[prefix + (token,)]
                if token == last:
                    extended[1] = np.logaddexp(extended[1], p_blank + p)
                    stay = nxt[prefix]
                    stay[1] = np.logaddexp(stay[1], p_nonblank + p)
                else:
                    extended[1] = np.logaddexp(extended[1], p_total + p)
        ranked = sorted(
            nxt.items(), key=lambda item: (-np.logaddexp(item[1][0], item[1][1]), item[0])
        )
        beams = {prefix: (pb, pnb) for prefix, (pb, pnb) in ranked[:beam_size]}
    hypotheses = []
    for prefix, (p_blank, p_nonblank) in beams.items():
        total = float(np.logaddexp(p_blank, p_nonblank))
        hypotheses.append(Hypothesis(tokens=prefix, score=total, log_prob_ctc=total))
    return NBestList(sorted(hypotheses, key=rank_key), beam_size=beam_size)


__all__ = [
    "CTCTrellis",
    "ctc_min_frames",
    "expand_target",
    "ctc_trellis",
    "ctc_loss",
    "ctc_greedy",
    "ctc_prefix_beam",
]
