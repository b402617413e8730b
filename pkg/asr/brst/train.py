"""Joint CTC-attention training: loss, warm-up schedule, Adam, clipping and the corpus loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, read_container, save_checkpoint, write_container
from .config import ModelConfig, TrainConfig
from .corpus import ManifestEntry, Utterance, load_utterances
from .ctc import ctc_loss, ctc_min_frames
from .errors import CheckpointError, ConfigError, ContractError, InputError, TrainingAbortedError
from .features import FeatureMatrix, spec_augment
from .model import (
    ModelParams,
    Vocabulary,
    build_model,
    ctc_head,
    decode_teacher_forced,
    encode_batch,
    subsampled_length,
)
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "ctc_loss", "att_loss", "lr", "grad_norm")
CHECKPOINT_DIR = "checkpoints"
METRICS_FILE = "metrics.csv"


@dataclass
class Batch:
    utt_ids: list[str]
    features: list[np.ndarray]
    targets: list[list[int]]

    def __len__(self) -> int:
        return len(self.utt_ids)


# Loss --------------------------------------------------------------------------------


@dataclass
class JointLoss:
    """Batch-mean sequence losses; ``total`` carries the tape."""

    total: Tensor
    ctc: Tensor
    att: Tensor

    @property
    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.ctc.item(), self.att.item()


def attention_nll(
    logprobs: Tensor, targets: Sequence[Sequence[int]], label_smoothing: float = 0.0
) -> Tensor:
    """Summed teacher-forced cross-entropy over the valid positions of every sequence."""

    b_idx = np.concatenate([np.full(len(t), b) for b, t in enumerate(targets)]).astype(np.int64)
    s_idx = np.concatenate([np.arange(len(t)) for t in targets]).astype(np.int64)
    tokens = np.concatenate([np.asarray(t, dtype=np.int64) for t in targets])
    picked = T.sum_(logprobs[b_idx, s_idx, tokens])
    if label_smoothing <= 0.0:
        return -picked
    vocab = logprobs.shape[-1]
    spread = T.sum_(logprobs[b_idx, s_idx]) * (1.0 / vocab)
    return -(picked * (1.0 - label_smoothing) + spread * label_smoothing)


def joint_loss(
    params: ModelParams,
    batch: Batch,
    ctc_weight: float,
    label_smoothing: float = 0.0,
    rng: np.random.Generator | None = None,
) -> JointLoss:
    """ctc_weight * CTC NLL + (1 - ctc_weight) * attention NLL, both averaged over the batch.

    The attention decoder is teacher-forced on sos + target and scored
    against target + eos.
    """

    if len(batch) == 0:
        raise InputError("cannot compute a loss on an empty batch")
    enc = encode_batch(params, batch.features, rng=rng)
    logprobs = ctc_head(params, enc.hidden)
    ctc_terms = [
        ctc_loss(logprobs[b, : int(enc.lengths[b])], target, params.vocab.blank)
        for b, target in enumerate(batch.targets)
    ]
    ctc = ctc_terms[0]
    for term in ctc_terms[1:]:
        ctc = ctc + term
    scale = 1.0 / len(batch)
    ctc = ctc * scale

    sos = eos = params.vocab.sos
    dec = decode_teacher_forced(
        params, enc.hidden, enc.mask, [[sos, *t] for t in batch.targets], rng=rng
    )
    att = attention_nll(dec.logprobs, [[*t, eos] for t in batch.targets], label_smoothing) * scale
    total = ctc * ctc_weight + att * (1.0 - ctc_weight)
    return JointLoss(total=total, ctc=ctc, att=att)


# Optimization -------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``peak_lr`` at ``warmup_steps``, then inverse square-root decay."""

    if step < 1:
        raise ContractError(f"lr_at needs step >= 1, got {step}")
    warmup = cfg.warmup_steps
    return cfg.peak_lr * min(step / warmup, math.sqrt(warmup / step))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale every gradient by max_norm / norm when the global norm exceeds max_norm."""

    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class OptimizerState:
    """Adam moments per parameter name, plus the step and data-order cursor."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    batch_index: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.store.items()},
            v={name: np.zeros_like(t.data) for name, t in params.store.items()},
        )

    def save(self, path: Path) -> None:
        tensors = {f"m.{name}": value for name, value in self.m.items()}
        tensors.update({f"v.{name}": value for name, value in self.v.items()})
        write_container(
            path, tensors, {"step": self.step, "epoch": self.epoch, "batch_index": self.batch_index}
        )

    @classmethod
    def load(cls, path: Path) -> "OptimizerState":
        metadata, tensors = read_container(path)
        m = {name[2:]: value for name, value in tensors.items() if name.startswith("m.")}
        v = {name[2:]: value for name, value in tensors.items() if name.startswith("v.")}
        if m.keys() != v.keys():
            raise CheckpointError(f"{path}: first and second moments disagree", component="optimizer")
        return cls(
            m=m,
            v=v,
            step=int(metadata.get("step", 0)),
            epoch=int(metadata.get("epoch", 0)),
            batch_index=int(metadata.get("batch_index", 0)),
        )


def adam_update(
    params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float, cfg: TrainConfig
) -> None:
    beta1, beta2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step + 1
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, tensor in params.store.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    state.step = t


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    ctc_loss: float
    att_loss: float
    lr: float
    grad_norm: float

    def row(self) -> list[str]:
        return [str(self.step), *(repr(float(getattr(self, f))) for f in METRIC_FIELDS[1:])]


def compute_gradients(
    params: ModelParams, batch: Batch, cfg: TrainConfig, rng: np.random.Generator | None = None
) -> tuple[JointLoss, dict[str, np.ndarray]]:
    with Tape() as tape:
        loss = joint_loss(params, batch, cfg.ctc_weight, cfg.label_smoothing, rng)
    if not np.isfinite(loss.total.data).all():
        raise TrainingAbortedError(
            f"non-finite loss {loss.total.item()} on batch {batch.utt_ids} "
            f"(ctc={loss.ctc.item()}, att={loss.att.item()})"
        )
    by_tensor = T.backward(tape, loss.total, params.parameters())
    return loss, {name: by_tensor[t] for name, t in params.store.items()}


def train_step(
    params: ModelParams,
    opt_state: OptimizerState,
    batch: Batch,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> StepMetrics:
    """One forward/backward/clip/Adam update; ``params`` and ``opt_state`` are updated in place."""

    loss, grads = compute_gradients(params, batch, cfg, rng)
    grads, norm = clip_gradients(grads, cfg.grad_clip)
    lr = lr_at(opt_state.step + 1, cfg)
    adam_update(params, grads, opt_state, lr, cfg)
    total, ctc, att = loss.values
    return StepMetrics(step=opt_state.step, loss=total, ctc_loss=ctc, att_loss=att, lr=lr, grad_norm=norm)


# Corpus loop ----------------------------------------------------------------------------


def epoch_order(num_utterances: int, epoch: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(num_utterances)


def make_batches(utterances: Sequence[Utterance], batch_size: int, epoch: int, seed: int) -> list[list[int]]:
    """Seeded shuffle, cut into batches, each sorted by length (longest first)."""

    order = epoch_order(len(utterances), epoch, seed).tolist()
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [sorted(b, key=lambda i: (-utterances[i].features.shape[0], i)) for b in batches]


def build_batch(
    utterances: Sequence[Utterance], indices: Sequence[int], cfg: TrainConfig, epoch: int
) -> Batch:
    features = []
    for index in indices:
        frames = utterances[index].features
        if cfg.use_spec_augment:
            rng = np.random.default_rng([cfg.seed, epoch, index])
            frames = spec_augment(FeatureMatrix(frames), cfg.spec_augment, rng).frames
        features.append(frames)
    return Batch(
        utt_ids=[utterances[i].utt_id for i in indices],
        features=features,
        targets=[utterances[i].tokens for i in indices],
    )


def smoothed_trend(losses: Sequence[float], window: int = 50) -> bool:
    """True when the means of consecutive ``window``-step blocks never increase."""

    values = np.asarray(losses, dtype=np.float64)
    blocks = len(values) // window
    if blocks < 2:
        return True
    means = values[: blocks * window].reshape(blocks, window).mean(axis=1)
    return bool(np.all(np.diff(means) <= 0.0))


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / CHECKPOINT_DIR / f"step_{step:07d}.brst"


def optimizer_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name + ".opt")


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted((out_dir / CHECKPOINT_DIR).glob("step_*.brst"))
    return found[-1] if found else None


@dataclass
class TrainingResult:
    params: ModelParams
    opt_state: OptimizerState
    metrics: list[StepMetrics] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def final_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None

    def loss_trend_ok(self, window: int = 50) -> bool:
        return smoothed_trend([m.loss for m in self.metrics], window)


def _feasible(utterances: list[Utterance], cfg: ModelConfig) -> list[Utterance]:
    kept = []
    for utt in utterances:
        frames = subsampled_length(utt.features.shape[0], cfg.subsampling)
        if frames < max(1, ctc_min_frames(utt.tokens)):
            logger.warning(
                "Skipping %s: %d encoder frames cannot carry %d tokens", utt.utt_id, frames, len(utt.tokens)
            )
            continue
        kept.append(utt)
    return kept


def _rewrite_metrics(path: Path, rows: list[list[str]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRIC_FIELDS)
        writer.writerows(rows)


def _kept_metric_rows(path: Path, up_to_step: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        next(reader, None)
        return [row for row in reader if row and int(row[0]) <= up_to_step]


def run_training(
    entries: Sequence[ManifestEntry],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir: Path,
    vocab: Vocabulary | None = None,
    resume: bool = False,
    init_params: ModelParams | None = None,
    threads: int = 1,
) -> TrainingResult:
    """Train over a manifest, writing checkpoints and ``metrics.csv`` under ``out_dir``.

    Epoch order and SpecAugment masks are derived from (seed, epoch, utterance)
    and the optimizer sidecar stores the data cursor, so resuming from any
    checkpoint replays exactly the steps an uninterrupted run would take.
    """

    if not entries:
        raise ConfigError("the training corpus is empty")
    vocab = vocab or Vocabulary.from_transcripts(e.transcript for e in entries)
    if vocab.size != model_cfg.vocab_size:
        raise ConfigError(
            f"model vocab_size={model_cfg.vocab_size} but the corpus vocabulary has {vocab.size} units"
        )
    utterances = _feasible(load_utterances(entries, vocab, cfg.apply_cmvn, threads), model_cfg)
    if not utterances:
        raise ConfigError("no utterance in the corpus is long enough for its transcript")

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS_FILE
    latest = latest_checkpoint(out_dir) if resume else None
    if latest is not None:
        params = load_checkpoint(latest).params
        opt_state = OptimizerState.load(optimizer_path(latest))
        _rewrite_metrics(metrics_path, _kept_metric_rows(metrics_path, opt_state.step))
        logger.info("Resuming from %s at step %d", latest, opt_state.step)
    else:
        params = init_params.clone() if init_params is not None else build_model(model_cfg, cfg.seed, vocab)
        opt_state = OptimizerState.zeros_like(params)
        _rewrite_metrics(metrics_path, [])

    result = TrainingResult(params=params, opt_state=opt_state)
    extra = {"apply_cmvn": cfg.apply_cmvn}
    epoch, start = opt_state.epoch, opt_state.batch_index
    while opt_state.step < cfg.max_steps and (cfg.num_epochs is None or epoch < cfg.num_epochs):
        batches = make_batches(utterances, cfg.batch_size, epoch, cfg.seed)
        for index in range(start, len(batches)):
            batch = build_batch(utterances, batches[index], cfg, epoch)
            dropout_rng = (
                np.random.default_rng([cfg.seed, opt_state.step]) if model_cfg.dropout_rate > 0 else None
            )
            metrics = train_step(params, opt_state, batch, cfg, dropout_rng)
            opt_state.epoch, opt_state.batch_index = epoch, index + 1
            result.metrics.append(metrics)
            with metrics_path.open("a", encoding="utf-8", newline="") as handle:
                csv.writer(handle).writerow(metrics.row())
            if metrics.step % cfg.log_every == 0:
                logger.info(
                    "[train] step=%d epoch=%d loss=%.4f ctc=%.4f att=%.4f lr=%.6g grad_norm=%.3f",
                    metrics.step,
                    epoch,
                    metrics.loss,
                    metrics.ctc_loss,
                    metrics.att_loss,
                    metrics.lr,
                    metrics.grad_norm,
                )
            if metrics.step % cfg.checkpoint_every == 0 or metrics.step >= cfg.max_steps:
                result.checkpoints.append(_save(out_dir, params, opt_state, extra))
            if opt_state.step >= cfg.max_steps:
                break
        epoch, start = epoch + 1, 0

    if not result.checkpoints or result.checkpoints[-1] != checkpoint_path(out_dir, opt_state.step):
        result.checkpoints.append(_save(out_dir, params, opt_state, extra))
    return result


def _save(out_dir: Path, params: ModelParams, opt_state: OptimizerState, extra: dict) -> Path:
    path = checkpoint_path(out_dir, opt_state.step)
    save_checkpoint(path, params, opt_state.step, extra)
    opt_state.save(optimizer_path(path))
    return path


__all__ = [
    "Batch",
    "JointLoss",
    "attention_nll",
    "joint_loss",
    "lr_at",
    "global_norm",
    "clip_gradients",
    "OptimizerState",
    "adam_update",
    "StepMetrics",
    "compute_gradients",
    "train_step",
    "epoch_order",
    "make_batches",
    "build_batch",
    "smoothed_trend",
    "checkpoint_path",
    "optimizer_path",
    "latest_checkpoint",
    "TrainingResult",
    "run_training",
]
