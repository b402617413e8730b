from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

Scale = Literal["full", "toy"]


class ModelConfig(BaseModel):
    """Architecture of the CTC-attention Transformer, stacked or block-reusing."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, extra="forbid")

    d_model: int = Field(default=256, gt=0, description="Width of every block output.")
    heads: int = Field(default=4, gt=0, description="Attention heads per attention layer.")
    ff_dim: int = Field(default=2048, gt=0, description="Inner width of the feed-forward layers.")
    num_encoder_blocks: int = Field(
        default=12, ge=1, alias="M", description="Distinct encoder blocks (M)."
    )
    num_decoder_blocks: int = Field(
        default=6, ge=1, alias="N", description="Distinct decoder blocks (N)."
    )
    encoder_repeats: int = Field(
        default=1,
        ge=1,
        alias="S1",
        description="How many times the encoder stack is applied per pass (S1).",
    )
    decoder_repeats: int = Field(
        default=1,
        ge=1,
        alias="S2",
        description="How many times the decoder stack is applied per pass (S2).",
    )
    adapters_encoder: bool = Field(
        default=False, description="Insert a linear+ReLU adapter after every encoder repetition."
    )
    adapters_decoder: bool = Field(
        default=False, description="Insert a linear+ReLU adapter after every decoder repetition."
    )
    vocab_size: int = Field(
        default=4233, ge=4, description="Size of the shared token set, blank and sos/eos included."
    )
    input_dim: int = Field(default=80, gt=0, description="Feature bins per input frame.")
    subsampling: int = Field(
        default=4, description="Frontend time subsampling factor: 1, 2 or 4 (stride-2 convolutions)."
    )
    dropout_rate: float = Field(
        default=0.0, ge=0.0, lt=1.0, description="Dropout applied after attention and feed-forward."
    )
    layer_norm_eps: float = Field(default=1e-5, gt=0.0, description="Layer-norm variance floor.")
    dtype: Literal["float64", "float32"] = Field(
        default="float64", description="Parameter precision; oracle tests run in float64."
    )

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.subsampling not in (1, 2, 4):
            raise ValueError(f"subsampling must be 1, 2 or 4, got {self.subsampling}")
        if self.d_model % self.heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by heads={self.heads}"
            )
        return self

    @property
    def M(self) -> int:
        return self.num_encoder_blocks

    @property
    def N(self) -> int:
        return self.num_decoder_blocks

    @property
    def S1(self) -> int:
        return self.encoder_repeats

    @property
    def S2(self) -> int:
        return self.decoder_repeats

    def updated(self, **changes: Any) -> "ModelConfig":
        return load_model_config(**{**self.model_dump(), **changes})


class SpecAugmentConfig(BaseModel):
    """Masking policy applied to training features."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_freq_masks: int = Field(default=2, ge=0, description="Frequency masks per utterance.")
    max_freq_bins: int = Field(default=10, ge=0, description="Widest frequency mask.")
    num_time_masks: int = Field(default=2, ge=0, description="Time masks per utterance.")
    max_time_frames: int = Field(default=50, ge=0, description="Widest time mask.")
    rng_seed: int = Field(default=0, description="Seed used when no generator is passed in.")


class TrainConfig(BaseModel):
    """Optimization settings for the joint CTC/attention objective."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, extra="forbid")

    ctc_weight: float = Field(
        default=0.3, ge=0.0, le=1.0, alias="lambda", description="Weight of the CTC term."
    )
    peak_lr: float = Field(default=0.002, gt=0.0, description="Learning rate reached at the end of warm-up.")
    warmup_steps: int = Field(default=25000, ge=1, description="Linear warm-up length in steps.")
    grad_clip: float = Field(default=5.0, gt=0.0, description="Global gradient-norm clip.")
    batch_size: int = Field(default=16, ge=1, description="Utterances per optimizer step.")
    max_steps: int = Field(default=100000, ge=1, description="Stop after this many optimizer steps.")
    num_epochs: Optional[int] = Field(
        default=None, ge=1, description="Stop after this many passes (None: only max_steps)."
    )
    label_smoothing: float = Field(
        default=0.0, ge=0.0, lt=1.0, description="Label smoothing of the attention cross-entropy."
    )
    seed: int = Field(default=0, description="Seed for initialization, data order and augmentation.")
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-9, gt=0.0)
    checkpoint_every: int = Field(default=1000, ge=1, description="Steps between checkpoints.")
    log_every: int = Field(default=50, ge=1, description="Steps between progress log lines.")
    apply_cmvn: bool = Field(default=True, description="Per-utterance mean/variance normalization.")
    use_spec_augment: bool = Field(default=True, description="Mask training features.")
    spec_augment: SpecAugmentConfig = Field(default_factory=SpecAugmentConfig)

    def updated(self, **changes: Any) -> "TrainConfig":
        return load_train_config(**{**self.model_dump(), **changes})


class DecodeSettings(BaseModel):
    """Runtime options of the four decoding methods."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Literal["cg", "cp", "att", "att-re"] = Field(default="att-re")
    beam_size: int = Field(default=10, ge=1, description="Beam for prefix and attention search.")
    ctc_nbest_size: int = Field(default=10, ge=1, description="CTC n-best fed to rescoring.")
    rescore_weight: float = Field(
        default=0.3, ge=0.0, le=1.0, description="CTC weight when rescoring with attention."
    )
    max_len: Optional[int] = Field(
        default=None, ge=1, description="Attention search steps (None: encoder length)."
    )
    length_penalty: float = Field(default=0.0, description="Per-token bonus in attention search.")


class ToyCorpusSpec(BaseModel):
    """Synthetic corpus where every token emits a fixed feature template."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_utterances: int = Field(default=100, ge=1)
    vocab_size: int = Field(default=30, ge=1, description="Distinct emitting tokens.")
    seed: int = Field(default=0)
    noise_sigma: float = Field(default=0.1, ge=0.0, description="Gaussian noise added to every frame.")
    template_frames: int = Field(default=8, ge=8, description="Frames emitted per token.")
    silence_frames: int = Field(default=8, ge=2, description="Silent frames before and after speech.")
    min_tokens: int = Field(default=2, ge=1)
    max_tokens: int = Field(default=6, ge=1)
    num_bins: int = Field(default=80, gt=0)

    @model_validator(mode="after")
    def _check_lengths(self) -> "ToyCorpusSpec":
        if self.min_tokens > self.max_tokens:
            raise ValueError("min_tokens must not exceed max_tokens")
        return self


PRESET_NAMES = ("baseline", "BR", "BRA-E", "BRA-D", "BRA-ED", "BRA-E-S18")

# Published parameter budgets (millions) for the full-scale presets.
REFERENCE_PARAMS_MILLIONS: dict[str, float] = {
    "baseline": 29.0,
    "BR": 7.75,
    "BRA-E": 8.5,
    "BRA-D": 8.25,
    "BRA-ED": 9.0,
    "BRA-E-S18": 8.875,
}

_SCALE_DIMS: dict[str, dict[str, Any]] = {
    "full": {"d_model": 256, "heads": 4, "ff_dim": 2048, "vocab_size": 4233},
    "toy": {"d_model": 64, "heads": 4, "ff_dim": 256, "vocab_size": 33},
}

# (M, N, S1, S2) for the stacked baseline and the reused family.
_SCALE_STACKS: dict[str, dict[str, tuple[int, int, int, int]]] = {
    "full": {"baseline": (12, 6, 1, 1), "reuse": (1, 1, 12, 6)},
    "toy": {"baseline": (4, 2, 1, 1), "reuse": (1, 1, 4, 2)},
}

_PRESET_FLAGS: dict[str, dict[str, Any]] = {
    "baseline": {},
    "BR": {},
    "BRA-E": {"adapters_encoder": True},
    "BRA-D": {"adapters_decoder": True},
    "BRA-ED": {"adapters_encoder": True, "adapters_decoder": True},
    "BRA-E-S18": {"adapters_encoder": True},
}


def _wrap(cls: type[BaseModel], payload: dict[str, Any]) -> Any:
    try:
        return cls.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"Invalid {cls.__name__}: {exc}") from exc


def load_model_config(**overrides: Any) -> ModelConfig:
    """Create a ModelConfig, turning validation failures into ConfigError."""

    return _wrap(ModelConfig, overrides)


def load_train_config(**overrides: Any) -> TrainConfig:
    return _wrap(TrainConfig, overrides)


def load_corpus_spec(**overrides: Any) -> ToyCorpusSpec:
    return _wrap(ToyCorpusSpec, overrides)


def load_decode_settings(**overrides: Any) -> DecodeSettings:
    return _wrap(DecodeSettings, overrides)


def resolve_preset(name: str, scale: str = "full", **overrides: Any) -> ModelConfig:
    """Expand an experiment preset name into its ModelConfig."""

    if name not in _PRESET_FLAGS:
        raise ConfigError(
            f"Unknown preset '{name}'. Valid presets: {', '.join(PRESET_NAMES)}"
        )
    if scale not in _SCALE_DIMS:
        raise ConfigError(f"Unknown scale '{scale}'. Valid scales: full, toy")
    stack = _SCALE_STACKS[scale]["baseline" if name == "baseline" else "reuse"]
    m, n, s1, s2 = stack
    if name == "BRA-E-S18":
        s1 = s1 * 3 // 2
    payload: dict[str, Any] = {
        **_SCALE_DIMS[scale],
        "num_encoder_blocks": m,
        "num_decoder_blocks": n,
        "encoder_repeats": s1,
        "decoder_repeats": s2,
        **_PRESET_FLAGS[name],
    }
    payload.update(overrides)
    return load_model_config(**payload)


def train_preset(scale: str = "full", **overrides: Any) -> TrainConfig:
    """Training defaults at full scale, or scaled down for CPU-sized toy runs."""

    payload: dict[str, Any] = {}
    if scale == "toy":
        payload = {
            "peak_lr": 0.002,
            "warmup_steps": 400,
            "batch_size": 8,
            "max_steps": 3000,
            "checkpoint_every": 500,
            "log_every": 50,
            "spec_augment": {
                "num_freq_masks": 2,
                "max_freq_bins": 10,
                "num_time_masks": 1,
                "max_time_frames": 4,
            },
        }
    elif scale != "full":
        raise ConfigError(f"Unknown scale '{scale}'. Valid scales: full, toy")
    payload.update(overrides)
    return load_train_config(**payload)


# Flat key=value config files ------------------------------------------------


def _field_keys(cls: type[BaseModel]) -> dict[str, str]:
    keys: dict[str, str] = {}
    for name, info in cls.model_fields.items():
        keys[name] = name
        if info.alias:
            keys[info.alias] = name
    return keys


_MODEL_KEYS = _field_keys(ModelConfig)
_TRAIN_KEYS = _field_keys(TrainConfig)
_SPEC_AUGMENT_KEYS = _field_keys(SpecAugmentConfig)
_META_KEYS = ("preset", "scale")


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment."""

    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"Line {lineno}: duplicate key '{key}'")
        values[key] = value
    return values


def _coerce(value: str) -> Any:
    return None if value.lower() in ("none", "") else value


def split_flat_config(
    values: dict[str, str],
) -> tuple[dict[str, Any], dict[str, Any], dict[str, str]]:
    """Route flat keys to (model fields, train fields, preset/scale)."""

    model: dict[str, Any] = {}
    train: dict[str, Any] = {}
    spec_augment: dict[str, Any] = {}
    meta: dict[str, str] = {}
    for key, value in values.items():
        if key in _META_KEYS:
            meta[key] = value
        elif key in _MODEL_KEYS:
            model[_MODEL_KEYS[key]] = _coerce(value)
        elif key.startswith("spec_augment.") and key[13:] in _SPEC_AUGMENT_KEYS:
            spec_augment[_SPEC_AUGMENT_KEYS[key[13:]]] = _coerce(value)
        elif key in _TRAIN_KEYS and key != "spec_augment":
            train[_TRAIN_KEYS[key]] = _coerce(value)
        else:
            raise ConfigError(f"Unknown config key '{key}'")
    if spec_augment:
        train["spec_augment"] = spec_augment
    return model, train, meta


class ResolvedConfig(BaseModel):
    """Model and training configuration after presets, files and flags are merged."""

    model_config = ConfigDict(frozen=True)

    preset: Optional[str] = None
    scale: str = "full"
    model: ModelConfig
    train: TrainConfig


def resolve_config(
    config_path: Path | None = None,
    preset: str | None = None,
    scale: str | None = None,
    model_overrides: dict[str, Any] | None = None,
    train_overrides: dict[str, Any] | None = None,
) -> ResolvedConfig:
    """Merge preset < config file < explicit overrides into one ResolvedConfig."""

    file_model: dict[str, Any] = {}
    file_train: dict[str, Any] = {}
    meta: dict[str, str] = {}
    if config_path is not None:
        if not config_path.exists():
            raise ConfigError(f"Config file {config_path} does not exist.")
        file_model, file_train, meta = split_flat_config(
            parse_flat_config(config_path.read_text(encoding="utf-8"))
        )
    preset = preset or meta.get("preset")
    scale = scale or meta.get("scale") or "full"
    model_payload = {**file_model, **(model_overrides or {})}
    if preset:
        model = resolve_preset(preset, scale, **model_payload)
    else:
        model = load_model_config(**model_payload)
    train_payload = {**file_train, **(train_overrides or {})}
    base_train = train_preset(scale)
    if "spec_augment" in train_payload:
        train_payload["spec_augment"] = {
            **base_train.spec_augment.model_dump(),
            **train_payload["spec_augment"],
        }
    train = base_train.updated(**train_payload)
    return ResolvedConfig(preset=preset, scale=scale, model=model, train=train)


def _render_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def render_flat_config(resolved: ResolvedConfig) -> str:
    """Snapshot a ResolvedConfig in the flat format accepted by resolve_config."""

    lines = ["# resolved configuration"]
    if resolved.preset:
        lines.append(f"preset = {resolved.preset}")
    lines.append(f"scale = {resolved.scale}")
    for key, value in resolved.model.model_dump().items():
        lines.append(f"{key} = {_render_value(value)}")
    for key, value in resolved.train.model_dump().items():
        if key == "spec_augment":
            for sub_key, sub_value in value.items():
                lines.append(f"spec_augment.{sub_key} = {_render_value(sub_value)}")
        else:
            lines.append(f"{key} = {_render_value(value)}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ModelConfig",
    "SpecAugmentConfig",
    "TrainConfig",
    "DecodeSettings",
    "ToyCorpusSpec",
    "ResolvedConfig",
    "PRESET_NAMES",
    "REFERENCE_PARAMS_MILLIONS",
    "load_model_config",
    "load_train_config",
    "load_corpus_spec",
    "load_decode_settings",
    "resolve_preset",
    "train_preset",
    "resolve_config",
    "parse_flat_config",
    "split_flat_config",
    "render_flat_config",
]
