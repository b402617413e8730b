from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .constants import DEFAULT_STATE_FILE
from .toy_pipeline import ModelOutcome, ToyExperimentResult

logger = logging.getLogger(__name__)


@dataclass
class RunRecord:
    """One finished toy experiment: where it ran and how each preset scored."""

    name: str
    workdir: str
    saved_at: str
    train_utterances: int
    test_utterances: int
    outcomes: list[ModelOutcome] = field(default_factory=list)

    def outcome(self, preset: str) -> ModelOutcome | None:
        return next((o for o in self.outcomes if o.preset == preset), None)

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> RunRecord:
        outcomes = [ModelOutcome(**o) for o in payload.get("outcomes", [])]
        return cls(**{**payload, "outcomes": outcomes})


class RunMemory:
    """Ordered log of toy experiments, kept as JSON so later invocations can compare presets."""

    def __init__(self, state_file: Path | None = None) -> None:
        self.state_file = state_file or DEFAULT_STATE_FILE

    def runs(self) -> list[RunRecord]:
        if not self.state_file.exists():
            return []
        try:
            payload = json.loads(self.state_file.read_text())
            return [RunRecord.from_dict(r) for r in payload["runs"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            logger.warning("Ignoring unreadable run log %s: %s", self.state_file, exc)
            return []

    def record(self, name: str, result: ToyExperimentResult) -> RunRecord:
        entry = RunRecord(
            name=name,
            workdir=result.workdir,
            saved_at=datetime.now(tz=timezone.utc).isoformat(),
            train_utterances=result.train_utterances,
            test_utterances=result.test_utterances,
            outcomes=list(result.outcomes),
        )
        # A rerun under the same name replaces the earlier entry and moves to the end.
        runs = [r for r in self.runs() if r.name != name] + [entry]
        self.state_file.parent.mkdir(parents=True, exist_ok=True)
        self.state_file.write_text(json.dumps({"runs": [asdict(r) for r in runs]}, indent=2))
        return entry

    def find(self, name: str | None = None) -> RunRecord | None:
        runs = self.runs()
        if name is None:
            return runs[-1] if runs else None
        return next((r for r in runs if r.name == name), None)

    def best(self, preset: str) -> tuple[RunRecord, ModelOutcome] | None:
        """Lowest-CER outcome for ``preset`` over every logged run; the earlier run wins ties."""

        scored = [(r, o) for r in self.runs() if (o := r.outcome(preset)) is not None]
        return min(scored, key=lambda pair: pair[1].cer) if scored else None


__all__ = ["RunMemory", "RunRecord", "DEFAULT_STATE_FILE"]
