from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from brst.analysis import dump_activations, linearity_flags, vertical_similarity
from brst.checkpoint import save_checkpoint
from brst.config import DecodeSettings, load_corpus_spec, resolve_preset, train_preset
from brst.corpus import ManifestEntry, generate_toy_corpus, load_utterances, read_manifest
from brst.decode import decode_corpus, score_corpus
from brst.model import ModelParams, Vocabulary, build_model, count_params, load_partial_checkpoint
from brst.train import run_training

from .constants import PRESET_NAMES, REFERENCE_PARAMS_MILLIONS, TOY_EXPERIMENT_PRESETS

logger = logging.getLogger(__name__)


@dataclass
class ModelOutcome:
    preset: str
    checkpoint: str
    params: int
    cer: float
    final_loss: float
    loss_trend_ok: bool
    linear_sites: int
    sites: int
    fresh_components: list[str] = field(default_factory=list)


@dataclass
class ToyExperimentResult:
    workdir: str
    train_utterances: int
    test_utterances: int
    outcomes: list[ModelOutcome] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def split_entries(
    entries: Sequence[ManifestEntry], test_fraction: float
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Hold out the last ``test_fraction`` of the manifest; both halves share the token templates."""

    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    cut = max(1, int(round(len(entries) * (1.0 - test_fraction))))
    if cut >= len(entries):
        raise ValueError("the corpus is too small to hold out a test split")
    return list(entries[:cut]), list(entries[cut:])


def _evaluate(
    preset: str,
    params: ModelParams,
    checkpoint: Path,
    test: list[ManifestEntry],
    losses: list[float],
    trend_ok: bool,
    threads: int,
    fresh: list[str],
) -> ModelOutcome:
    utterances = load_utterances(test, params.vocab, True, threads)
    results = decode_corpus(params, utterances, DecodeSettings(method="att-re"), threads)
    corpus = score_corpus({e.utt_id: e.transcript for e in test}, {r.utt_id: r.text for r in results})
    flags = linearity_flags(vertical_similarity(dump_activations(params, utterances, max_rows=2000, tag=preset)))
    logger.info("%s: CER %.2f%%, %d/%d linear sites", preset, 100 * corpus.cer, sum(flags.values()), len(flags))
    return ModelOutcome(
        preset=preset,
        checkpoint=str(checkpoint),
        params=count_params(params).total,
        cer=corpus.cer,
        final_loss=losses[-1] if losses else float("nan"),
        loss_trend_ok=trend_ok,
        linear_sites=sum(flags.values()),
        sites=len(flags),
        fresh_components=fresh,
    )


def run_toy_experiment(
    workdir: Path,
    presets: Sequence[str] = TOY_EXPERIMENT_PRESETS,
    steps: int = 3000,
    warm_start_steps: int = 1000,
    num_utterances: int = 200,
    test_fraction: float = 0.2,
    seed: int = 0,
    threads: int = 1,
) -> ToyExperimentResult:
    """Generate the toy corpus, train BR, warm-start the adapter presets from it, then decode and analyze.

    Every model is scored with attention rescoring on the held-out split and
    counted for vertical sites at or above the linearity threshold.
    """

    unknown = [p for p in presets if p not in PRESET_NAMES]
    if unknown:
        raise ValueError(f"unknown presets {unknown}; choose from {', '.join(PRESET_NAMES)}")
    if "BR" not in presets:
        presets = ("BR", *presets)

    manifest = generate_toy_corpus(load_corpus_spec(num_utterances=num_utterances, seed=seed), workdir / "corpus")
    train, test = split_entries(read_manifest(manifest), test_fraction)
    vocab = Vocabulary.from_transcripts(e.transcript for e in train + test)
    result = ToyExperimentResult(workdir=str(workdir), train_utterances=len(train), test_utterances=len(test))

    base_cfg = resolve_preset("BR", "toy", vocab_size=vocab.size)
    logger.info("Training BR on %d utterances for %d steps", len(train), steps)
    br = run_training(
        train, train_preset("toy", max_steps=steps, seed=seed), base_cfg, workdir / "BR", vocab=vocab, threads=threads
    )
    result.outcomes.append(
        _evaluate(
            "BR", br.params, br.final_checkpoint, test, [m.loss for m in br.metrics], br.loss_trend_ok(), threads, []
        )
    )

    for preset in presets:
        if preset == "BR":
            continue
        target_cfg = resolve_preset(preset, "toy", vocab_size=vocab.size)
        warm, provenance = load_partial_checkpoint(build_model(target_cfg, seed, vocab), br.params)
        save_checkpoint(workdir / f"{preset}.init.brst", warm, 0, {"apply_cmvn": True})
        logger.info("Warm-started %s from BR (%d fresh components)", preset, len(provenance.fresh))
        trained = run_training(
            train,
            train_preset("toy", max_steps=warm_start_steps, seed=seed),
            target_cfg,
            workdir / preset,
            vocab=vocab,
            init_params=warm,
            threads=threads,
        )
        result.outcomes.append(
            _evaluate(
                preset,
                trained.params,
                trained.final_checkpoint,
                test,
                [m.loss for m in trained.metrics],
                trained.loss_trend_ok(),
                threads,
                provenance.fresh,
            )
        )
    return result


def parameter_rows(scale: str = "full") -> list[dict[str, Any]]:
    """Parameter totals of every preset next to the published budgets."""

    baseline = count_params(resolve_preset("baseline", scale)).total
    rows = []
    for name in PRESET_NAMES:
        total = count_params(resolve_preset(name, scale)).total
        reference = REFERENCE_PARAMS_MILLIONS.get(name) if scale == "full" else None
        rows.append(
            {
                "model": name,
                "total": total,
                "millions": total / 1e6,
                "ratio_vs_baseline": total / baseline,
                "reference_millions": reference,
                "relative_gap": None if reference is None else abs(total / 1e6 - reference) / reference,
            }
        )
    return rows


__all__ = [
    "ModelOutcome",
    "ToyExperimentResult",
    "parameter_rows",
    "run_toy_experiment",
    "split_entries",
]
