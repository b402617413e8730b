from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

from .errors import InputError


@dataclass(frozen=True)
class Hypothesis:
    """A decoded token sequence with the scores known for it.

    ``partial`` marks attention hypotheses that never produced eos before
    the length limit.
    """

    tokens: tuple[int, ...]
    score: float
    log_prob_ctc: float | None = None
    log_prob_att: float | None = None
    partial: bool = False

    def rescored(self, log_prob_att: float, weight: float) -> "Hypothesis":
        if self.log_prob_ctc is None:
            raise InputError("rescoring needs a CTC log-probability")
        # Zero-weight terms are dropped so a -inf score on the ignored side cannot produce NaN.
        combined = (weight * self.log_prob_ctc if weight > 0.0 else 0.0) + (
            (1.0 - weight) * log_prob_att if weight < 1.0 else 0.0
        )
        return Hypothesis(
            tokens=self.tokens,
            score=combined,
            log_prob_ctc=self.log_prob_ctc,
            log_prob_att=log_prob_att,
            partial=self.partial,
        )


def rank_key(hyp: Hypothesis) -> tuple[float, tuple[int, ...]]:
    """Descending score, then lexicographic tokens."""

    return (-hyp.score, hyp.tokens)


@dataclass
class NBestList:
    hypotheses: list[Hypothesis]
    beam_size: int
    truncated: bool = False

    def __post_init__(self) -> None:
        self.hypotheses = sorted(self.hypotheses, key=rank_key)[: self.beam_size]

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self) -> Iterator[Hypothesis]:
        return iter(self.hypotheses)

    def __getitem__(self, index: int) -> Hypothesis:
        return self.hypotheses[index]

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]

    def token_lists(self) -> list[Sequence[int]]:
        return [h.tokens for h in self.hypotheses]


__all__ = ["Hypothesis", "NBestList", "rank_key"]
