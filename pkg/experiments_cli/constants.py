from __future__ import annotations

from pathlib import Path

from brst.config import PRESET_NAMES, REFERENCE_PARAMS_MILLIONS

DEFAULT_STATE_FILE = Path.home() / ".cache" / "brst" / "runs.json"
DEFAULT_WORKDIR = Path("runs") / "toy-experiment"

# BR is trained from scratch; every other preset here is warm-started from it.
TOY_EXPERIMENT_PRESETS = ("BR", "BRA-E")

__all__ = [
    "DEFAULT_STATE_FILE",
    "DEFAULT_WORKDIR",
    "PRESET_NAMES",
    "REFERENCE_PARAMS_MILLIONS",
    "TOY_EXPERIMENT_PRESETS",
]
