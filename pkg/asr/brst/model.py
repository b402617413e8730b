"""CTC-attention Transformer with stacked or reused blocks and per-repetition adapters.

Parameters live in a flat :class:`~brst.tensor.ParamStore` keyed by dotted
names. The encoder holds ``M`` distinct blocks and applies the whole stack
``S1`` times; with ``M=1`` that is one shared block reused ``S1`` times. When
adapters are enabled, repetition ``r`` is followed by its own
``relu(linear_r(x))``. The decoder mirrors this with ``N`` and ``S2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import CheckpointError, ConfigError, InputError, NumericError
from .tensor import MASK_VALUE, ParamStore, Tensor

logger = logging.getLogger(__name__)

BLANK = "<blank>"
UNK = "<unk>"
SOS_EOS = "<sos/eos>"
SYNTHETIC_BASE = 0x4E00


# Vocabulary -------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Output units shared by the CTC and attention heads.

    Index 0 is the CTC blank, index 1 the unknown token and the last index the
    joint start/end-of-sentence token.
    """

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) < 4:
            raise ConfigError("a vocabulary needs blank, unk, sos/eos and at least one unit")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        if self.tokens[0] != BLANK or self.tokens[1] != UNK or self.tokens[-1] != SOS_EOS:
            raise ConfigError(f"vocabulary must start with {BLANK}, {UNK} and end with {SOS_EOS}")
        object.__setattr__(self, "_index", {token: i for i, token in enumerate(self.tokens)})

    @classmethod
    def from_transcripts(cls, transcripts: Iterable[str]) -> "Vocabulary":
        units = sorted({ch for text in transcripts for ch in text if not ch.isspace()})
        return cls((BLANK, UNK, *units, SOS_EOS))

    @classmethod
    def synthetic(cls, num_units: int) -> "Vocabulary":
        return cls((BLANK, UNK, *(chr(SYNTHETIC_BASE + i) for i in range(num_units)), SOS_EOS))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return 0

    @property
    def unk(self) -> int:
        return 1

    @property
    def sos(self) -> int:
        return len(self.tokens) - 1

    @property
    def eos(self) -> int:
        return len(self.tokens) - 1

    def encode(self, text: str) -> list[int]:
        index: dict[str, int] = self._index  # type: ignore[attr-defined]
        return [index.get(ch, self.unk) for ch in text if not ch.isspace()]

    def decode(self, ids: Iterable[int]) -> str:
        special = {self.blank, self.sos}
        return "".join(self.tokens[i] for i in ids if i not in special)


# Parameters ------------------------------------------------------------------


def frontend_dims(cfg: ModelConfig) -> list[int]:
    """Feature-axis extent after each strided convolution of the frontend."""

    dims = [cfg.input_dim]
    for _ in range(int(math.log2(cfg.subsampling))):
        dims.append((dims[-1] - 1) // 2)
    if dims[-1] < 1:
        raise ConfigError(f"input_dim={cfg.input_dim} is too small for subsampling {cfg.subsampling}")
    return dims


def subsampled_length(num_frames: int, factor: int = 4) -> int:
    length = num_frames
    for _ in range(int(math.log2(factor))):
        length = (length - 1) // 2
    return max(length, 0)


def _linear_shapes(prefix: str, fan_in: int, fan_out: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.weight": (fan_in, fan_out), f"{prefix}.bias": (fan_out,)}


def _norm_shapes(prefix: str, width: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.gain": (width,), f"{prefix}.bias": (width,)}


def _attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for proj in ("q", "k", "v", "o"):
        shapes.update(_linear_shapes(f"{prefix}.{proj}", d, d))
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape for ``cfg``, in allocation order."""

    d, ff, vocab = cfg.d_model, cfg.ff_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {}

    dims = frontend_dims(cfg)
    channels = 1
    for i in range(len(dims) - 1):
        shapes[f"frontend.conv.{i}.weight"] = (d, channels, 3, 3)
        shapes[f"frontend.conv.{i}.bias"] = (d,)
        channels = d
    shapes.update(_linear_shapes("frontend.proj", channels * dims[-1], d))

    for m in range(cfg.M):
        prefix = f"encoder.blocks.{m}"
        shapes.update(_attention_shapes(f"{prefix}.self_attn", d))
        shapes.update(_linear_shapes(f"{prefix}.ff.0", d, ff))
        shapes.update(_linear_shapes(f"{prefix}.ff.1", ff, d))
        shapes.update(_norm_shapes(f"{prefix}.norm1", d))
        shapes.update(_norm_shapes(f"{prefix}.norm2", d))
    if cfg.adapters_encoder:
        for r in range(cfg.S1):
            shapes.update(_linear_shapes(f"encoder.adapters.{r}", d, d))
    shapes.update(_norm_shapes("encoder.norm", d))

    shapes["decoder.embed.weight"] = (vocab, d)
    for n in range(cfg.N):
        prefix = f"decoder.blocks.{n}"
        shapes.update(_attention_shapes(f"{prefix}.self_attn", d))
        shapes.update(_attention_shapes(f"{prefix}.src_attn", d))
        shapes.update(_linear_shapes(f"{prefix}.ff.0", d, ff))
        shapes.update(_linear_shapes(f"{prefix}.ff.1", ff, d))
        for k in (1, 2, 3):
            shapes.update(_norm_shapes(f"{prefix}.norm{k}", d))
    if cfg.adapters_decoder:
        for r in range(cfg.S2):
            shapes.update(_linear_shapes(f"decoder.adapters.{r}", d, d))
    shapes.update(_norm_shapes("decoder.norm", d))
    shapes.update(_linear_shapes("decoder.output", d, vocab))

    shapes.update(_linear_shapes("ctc", d, vocab))
    return shapes


def component_of(name: str) -> str:
    """Group a parameter name into its component (``encoder.blocks.0``, ``ctc``, ...)."""

    parts = name.split(".")
    if len(parts) > 2 and parts[1] in ("blocks", "adapters"):
        return ".".join(parts[:3])
    return ".".join(parts[:-1])


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    elif name == "decoder.embed.weight":
        fan_in = shape[1]
    else:
        fan_in = shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModelParams:
    config: ModelConfig
    vocab: Vocabulary
    store: ParamStore

    def __getitem__(self, name: str) -> Tensor:
        return self.store[name]

    def parameters(self) -> list[Tensor]:
        return list(self.store.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.store.arrays()

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, self.vocab, self.store.clone())

    def components(self) -> list[str]:
        return list(dict.fromkeys(component_of(name) for name in self.store))

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)


def build_model(cfg: ModelConfig, seed: int = 0, vocab: Vocabulary | None = None) -> ModelParams:
    """Allocate and initialize every parameter for ``cfg`` from ``seed``."""

    vocab = vocab or Vocabulary.synthetic(cfg.vocab_size - 3)
    if vocab.size != cfg.vocab_size:
        raise ConfigError(f"vocabulary has {vocab.size} units but vocab_size={cfg.vocab_size}")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    store = ParamStore()
    for name, shape in param_shapes(cfg).items():
        store.add(name, _init_value(name, shape, rng), dtype)
    logger.debug("Built model with %d tensors (%d values)", len(store), store.num_elements())
    return ModelParams(cfg, vocab, store)


# Parameter accounting -----------------------------------------------------------


_REPORT_ORDER = (
    "frontend",
    "encoder_blocks",
    "encoder_adapters",
    "encoder_norm",
    "decoder_blocks",
    "decoder_adapters",
    "decoder_norm",
    "embedding",
    "ctc_head",
    "attention_head",
)


def _report_bucket(name: str) -> str:
    if name.startswith("frontend."):
        return "frontend"
    if name.startswith("ctc."):
        return "ctc_head"
    if name.startswith("decoder.embed."):
        return "embedding"
    if name.startswith("decoder.output."):
        return "attention_head"
    side, part = name.split(".")[:2]
    if part == "norm":
        return f"{side}_norm"
    return f"{side}_{part}"


@dataclass(frozen=True)
class ParamReport:
    components: dict[str, int]
    encoder_block_sets: int
    decoder_block_sets: int
    encoder_block_size: int
    decoder_block_size: int
    adapter_size: int

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def rows(self) -> list[tuple[str, int]]:
        return [(name, self.components[name]) for name in _REPORT_ORDER] + [("total", self.total)]


def count_params(source: ModelParams | ModelConfig) -> ParamReport:
    """Exact parameter counts per component; additive, so the total is their sum."""

    cfg = source.config if isinstance(source, ModelParams) else source
    if isinstance(source, ModelParams):
        shapes = {name: t.shape for name, t in source.store.items()}
    else:
        shapes = param_shapes(cfg)
    counts = dict.fromkeys(_REPORT_ORDER, 0)
    for name, shape in shapes.items():
        counts[_report_bucket(name)] += math.prod(shape)
    d = cfg.d_model
    return ParamReport(
        components=counts,
        encoder_block_sets=cfg.M,
        decoder_block_sets=cfg.N,
        encoder_block_size=counts["encoder_blocks"] // cfg.M,
        decoder_block_size=counts["decoder_blocks"] // cfg.N,
        adapter_size=d * d + d,
    )


# Layers -------------------------------------------------------------------------


def positional_encoding(length: int, d_model: int, dtype: np.dtype = np.float64) -> np.ndarray:
    position = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * -(math.log(10000.0) / d_model))
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div)[:, : d_model // 2]
    return pe.astype(dtype)


def linear(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]


def norm(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], params.config.layer_norm_eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, d = x.shape
    return x.reshape(batch, length, heads, d // heads).transpose(0, 2, 1, 3)


def attention(
    params: ModelParams, prefix: str, query: Tensor, memory: Tensor, mask: np.ndarray
) -> Tensor:
    """Multi-head scaled dot-product attention; ``mask`` is additive, (B, 1|Lq, Lk)."""

    heads = params.config.heads
    batch, length, d = query.shape
    q = _split_heads(linear(params, f"{prefix}.q", query), heads)
    k = _split_heads(linear(params, f"{prefix}.k", memory), heads)
    v = _split_heads(linear(params, f"{prefix}.v", memory), heads)
    scores = q @ k.transpose(0, 1, 3, 2) * (1.0 / math.sqrt(d // heads))
    weights = T.softmax(scores + mask[:, None, :, :].astype(scores.dtype))
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, d)
    return linear(params, f"{prefix}.o", context)


def feed_forward(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return linear(params, f"{prefix}.1", T.relu(linear(params, f"{prefix}.0", x)))


def adapter(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return T.relu(linear(params, prefix, x))


def encoder_block(
    params: ModelParams, index: int, x: Tensor, mask: np.ndarray, rng: np.random.Generator | None = None
) -> Tensor:
    prefix = f"encoder.blocks.{index}"
    rate = params.config.dropout_rate
    normed = norm(params, f"{prefix}.norm1", x)
    x = x + T.dropout(attention(params, f"{prefix}.self_attn", normed, normed, mask), rate, rng)
    return x + T.dropout(feed_forward(params, f"{prefix}.ff", norm(params, f"{prefix}.norm2", x)), rate, rng)


def decoder_block(
    params: ModelParams,
    index: int,
    y: Tensor,
    memory: Tensor,
    self_mask: np.ndarray,
    memory_mask: np.ndarray,
    rng: np.random.Generator | None = None,
) -> Tensor:
    prefix = f"decoder.blocks.{index}"
    rate = params.config.dropout_rate
    normed = norm(params, f"{prefix}.norm1", y)
    y = y + T.dropout(attention(params, f"{prefix}.self_attn", normed, normed, self_mask), rate, rng)
    y = y + T.dropout(
        attention(params, f"{prefix}.src_attn", norm(params, f"{prefix}.norm2", y), memory, memory_mask),
        rate,
        rng,
    )
    return y + T.dropout(feed_forward(params, f"{prefix}.ff", norm(params, f"{prefix}.norm3", y)), rate, rng)


def key_padding_mask(lengths: Sequence[int], max_len: int) -> np.ndarray:
    """Additive (B, 1, max_len) mask hiding positions at or beyond each length."""

    valid = np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, MASK_VALUE)[:, None, :]


def causal_mask(lengths: Sequence[int], max_len: int) -> np.ndarray:
    future = np.triu(np.ones((max_len, max_len), dtype=bool), k=1)
    return np.where(future[None, :, :], MASK_VALUE, key_padding_mask(lengths, max_len))


# Encoder --------------------------------------------------------------------------


@dataclass
class EncoderOutput:
    """Batched encoder result; rows at or past ``lengths[b]`` are padding."""

    hidden: Tensor
    lengths: np.ndarray
    mask: np.ndarray
    captures: list[tuple[str, Tensor]] = field(default_factory=list)


@dataclass
class EmbeddingSequence:
    """Single-utterance encoder view used by decoding and analysis.

    ``input`` is the positional-encoded frontend output; ``per_repetition``
    holds one ``enc-i`` capture per block application and, with adapters, one
    ``enc-i-after-ADM`` capture after each repetition.
    """

    input: np.ndarray
    per_repetition: list[tuple[str, np.ndarray]]
    H: np.ndarray

    @property
    def length(self) -> int:
        return self.H.shape[0]


def _check_finite(x: Tensor, side: str, repetition: int) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(
            f"non-finite activation in {side} repetition {repetition}", repetition=repetition
        )


def frontend(params: ModelParams, features: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
    """Strided convolutions + projection; returns (B, L, d) scaled and position-encoded."""

    cfg = params.config
    lengths = np.array([subsampled_length(f.shape[0], cfg.subsampling) for f in features])
    if np.any(lengths < 1):
        short = int(np.argmin(lengths))
        raise InputError(
            f"utterance {short} has {features[short].shape[0]} frames, too few for ×{cfg.subsampling} subsampling"
        )
    for f in features:
        if f.ndim != 2 or f.shape[1] != cfg.input_dim:
            raise InputError(f"expected (T, {cfg.input_dim}) features, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise InputError("features contain non-finite values")
    max_frames = max(f.shape[0] for f in features)
    padded = np.zeros((len(features), max_frames, cfg.input_dim), dtype=params.dtype)
    for b, f in enumerate(features):
        padded[b, : f.shape[0]] = f
    x = Tensor(padded)
    num_convs = int(math.log2(cfg.subsampling))
    if num_convs:
        x = x.reshape(len(features), 1, max_frames, cfg.input_dim)
        for i in range(num_convs):
            x = T.relu(
                T.conv2d(x, params[f"frontend.conv.{i}.weight"], params[f"frontend.conv.{i}.bias"], stride=2)
            )
        batch, channels, frames, bins = x.shape
        x = x.transpose(0, 2, 1, 3).reshape(batch, frames, channels * bins)
    x = linear(params, "frontend.proj", x)
    pe = positional_encoding(x.shape[1], cfg.d_model, params.dtype)
    return x * math.sqrt(cfg.d_model) + pe, lengths


def encode_batch(
    params: ModelParams,
    features: Sequence[np.ndarray],
    rng: np.random.Generator | None = None,
    capture: bool = False,
) -> EncoderOutput:
    cfg = params.config
    x, lengths = frontend(params, features)
    x = T.dropout(x, cfg.dropout_rate, rng)
    mask = key_padding_mask(lengths, x.shape[1])
    captures: list[tuple[str, Tensor]] = [("enc-0", x)] if capture else []
    applied = 0
    for r in range(cfg.S1):
        for m in range(cfg.M):
            x = encoder_block(params, m, x, mask, rng)
            applied += 1
            if capture:
                captures.append((f"enc-{applied}", x))
        if cfg.adapters_encoder:
            x = adapter(params, f"encoder.adapters.{r}", x)
            if capture:
                captures.append((f"enc-{applied}-after-ADM", x))
        _check_finite(x, "encoder", r)
    hidden = norm(params, "encoder.norm", x)
    return EncoderOutput(hidden=hidden, lengths=lengths, mask=mask, captures=captures)


def encode(params: ModelParams, features: np.ndarray) -> EmbeddingSequence:
    """Encode one utterance without recording gradients."""

    frames = getattr(features, "frames", features)
    with T.no_grad():
        out = encode_batch(params, [np.asarray(frames)], capture=True)
    length = int(out.lengths[0])
    (_, first), *rest = out.captures
    return EmbeddingSequence(
        input=first.data[0, :length],
        per_repetition=[(label, t.data[0, :length]) for label, t in rest],
        H=out.hidden.data[0, :length],
    )


# Decoder ----------------------------------------------------------------------------


@dataclass
class DecoderOutput:
    logprobs: Tensor
    lengths: np.ndarray
    captures: list[tuple[str, Tensor]] = field(default_factory=list)


def _check_ids(params: ModelParams, sequences: Sequence[Sequence[int]]) -> None:
    vocab = params.config.vocab_size
    for seq in sequences:
        for token in seq:
            if not 0 <= int(token) < vocab:
                raise InputError(f"token id {token} is outside the vocabulary [0, {vocab})")


def decode_teacher_forced(
    params: ModelParams,
    memory: Tensor,
    memory_mask: np.ndarray,
    prefixes: Sequence[Sequence[int]],
    rng: np.random.Generator | None = None,
    capture: bool = False,
) -> DecoderOutput:
    """Run the decoder over whole input prefixes; row s predicts the token after prefix[: s + 1]."""

    cfg = params.config
    _check_ids(params, prefixes)
    if any(len(p) == 0 for p in prefixes):
        raise InputError("decoder prefixes must contain at least the start token")
    lengths = np.array([len(p) for p in prefixes])
    max_len = int(lengths.max())
    ids = np.full((len(prefixes), max_len), params.config.vocab_size - 1, dtype=np.int64)
    for b, prefix in enumerate(prefixes):
        ids[b, : len(prefix)] = prefix
    y = T.embedding(params["decoder.embed.weight"], ids) * math.sqrt(cfg.d_model)
    y = y + positional_encoding(max_len, cfg.d_model, params.dtype)
    y = T.dropout(y, cfg.dropout_rate, rng)
    self_mask = causal_mask(lengths, max_len)
    captures: list[tuple[str, Tensor]] = [("dec-0", y)] if capture else []
    applied = 0
    for r in range(cfg.S2):
        for n in range(cfg.N):
            y = decoder_block(params, n, y, memory, self_mask, memory_mask, rng)
            applied += 1
            if capture:
                captures.append((f"dec-{applied}", y))
        if cfg.adapters_decoder:
            y = adapter(params, f"decoder.adapters.{r}", y)
            if capture:
                captures.append((f"dec-{applied}-after-ADM", y))
        _check_finite(y, "decoder", r)
    logits = linear(params, "decoder.output", norm(params, "decoder.norm", y))
    return DecoderOutput(logprobs=T.log_softmax(logits), lengths=lengths, captures=captures)


def _memory(params: ModelParams, H: np.ndarray | Tensor, copies: int) -> tuple[Tensor, np.ndarray]:
    data = H.data if isinstance(H, Tensor) else np.asarray(H, dtype=params.dtype)
    if data.ndim != 2 or data.shape[1] != params.config.d_model:
        raise InputError(f"expected an L x {params.config.d_model} encoder output, got {data.shape}")
    tiled = np.broadcast_to(data, (copies, *data.shape))
    return Tensor(np.ascontiguousarray(tiled)), np.zeros((copies, 1, data.shape[0]))


def decoder_step(params: ModelParams, H: np.ndarray | Tensor, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """Next-token log-probabilities for several equal-length prefixes over one encoder output."""

    sos = params.config.vocab_size - 1
    if any(not p or p[0] != sos for p in prefixes):
        raise InputError("decoder prefixes must begin with the start-of-sentence token")
    with T.no_grad():
        memory, memory_mask = _memory(params, H, len(prefixes))
        out = decode_teacher_forced(params, memory, memory_mask, prefixes)
    rows = out.lengths - 1
    return out.logprobs.data[np.arange(len(prefixes)), rows]


def decoder_forward(params: ModelParams, H: np.ndarray | Tensor, y_prefix: Sequence[int]) -> np.ndarray:
    """Log-probabilities over the vocabulary for the token following ``y_prefix``."""

    return decoder_step(params, H, [list(y_prefix)])[0]


def sequence_log_probs(
    params: ModelParams, H: np.ndarray | Tensor, sequences: Sequence[Sequence[int]]
) -> np.ndarray:
    """Teacher-forced attention log-likelihoods of sos + tokens -> tokens + eos, one per sequence."""

    if not sequences:
        return np.zeros(0)
    eos = params.config.vocab_size - 1
    with T.no_grad():
        memory, memory_mask = _memory(params, H, len(sequences))
        out = decode_teacher_forced(params, memory, memory_mask, [[eos, *seq] for seq in sequences])
    scores = np.empty(len(sequences))
    for b, seq in enumerate(sequences):
        targets = [*seq, eos]
        scores[b] = out.logprobs.data[b, np.arange(len(targets)), targets].sum()
    return scores


def sequence_log_prob(params: ModelParams, H: np.ndarray | Tensor, tokens: Sequence[int]) -> float:
    return float(sequence_log_probs(params, H, [list(tokens)])[0])


def ctc_head(params: ModelParams, H: np.ndarray | Tensor) -> Tensor:
    """Per-frame log-probabilities over the vocabulary (linear + log-softmax)."""

    hidden = H if isinstance(H, Tensor) else Tensor(np.asarray(H, dtype=params.dtype))
    return T.log_softmax(linear(params, "ctc", hidden))


# Warm start ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    copied: list[str]
    fresh: list[str]
    dropped: list[str]

    def to_dict(self) -> dict[str, list[str]]:
        return {"copied": self.copied, "fresh": self.fresh, "dropped": self.dropped}


def _is_adapter(component: str) -> bool:
    return ".adapters." in f"{component}."


def load_partial_checkpoint(
    target: ModelParams, source: ModelParams | Path
) -> tuple[ModelParams, Provenance]:
    """Copy every shared component of ``source`` into a clone of ``target``.

    Adapters absent from the source keep their fresh initialization. Source
    components the target lacks are reported as dropped.
    """

    if not isinstance(source, ModelParams):
        from .checkpoint import load_checkpoint

        source = load_checkpoint(Path(source)).params
    for side, attr in (("encoder", "M"), ("decoder", "N")):
        have, want = getattr(source.config, attr), getattr(target.config, attr)
        if have != want:
            raise CheckpointError(
                f"source has {have} {side} block sets but target expects {want}; no merge rule exists",
                component=f"{side}.blocks",
            )
    result = target.clone()
    by_component: dict[str, list[str]] = {}
    for name in result.store:
        by_component.setdefault(component_of(name), []).append(name)
    source_components = set(source.components())
    copied: list[str] = []
    fresh: list[str] = []
    for component, names in by_component.items():
        if component not in source_components:
            if not _is_adapter(component):
                raise CheckpointError(f"source checkpoint lacks component {component}", component=component)
            fresh.append(component)
            continue
        for name in names:
            if name not in source.store or source[name].shape != result[name].shape:
                found = source.store[name].shape if name in source.store else None
                raise CheckpointError(
                    f"{name}: target shape {result[name].shape} does not match source {found}",
                    component=component,
                )
            result[name].data = source[name].data.astype(result.dtype, copy=True)
        copied.append(component)
    dropped = [c for c in source.components() if c not in by_component]
    result = ModelParams(result.config, source.vocab, result.store)
    logger.info("Warm start copied %d components, %d fresh, %d dropped", len(copied), len(fresh), len(dropped))
    return result, Provenance(copied=copied, fresh=fresh, dropped=dropped)


__all__ = [
    "BLANK",
    "UNK",
    "SOS_EOS",
    "Vocabulary",
    "ModelParams",
    "ParamReport",
    "Provenance",
    "EncoderOutput",
    "EmbeddingSequence",
    "DecoderOutput",
    "frontend_dims",
    "subsampled_length",
    "param_shapes",
    "component_of",
    "build_model",
    "count_params",
    "positional_encoding",
    "key_padding_mask",
    "causal_mask",
    "encoder_block",
    "decoder_block",
    "adapter",
    "encode_batch",
    "encode",
    "decode_teacher_forced",
    "decoder_step",
    "decoder_forward",
    "sequence_log_prob",
    "ctc_head",
    "load_partial_checkpoint",
]
