from __future__ import annotations

from .constants import DEFAULT_STATE_FILE, DEFAULT_WORKDIR, TOY_EXPERIMENT_PRESETS
from .memory import RunMemory, RunRecord

__all__ = [
    "RunMemory",
    "RunRecord",
    "DEFAULT_STATE_FILE",
    "DEFAULT_WORKDIR",
    "TOY_EXPERIMENT_PRESETS",
]
