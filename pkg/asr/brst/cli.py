from __future__ import annotations

import csv
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .analysis import (
    DEFAULT_LINEARITY_THRESHOLD,
    dump_activations,
    horizontal_similarity,
    linearity_flags,
    plot_reports,
    vertical_similarity,
    write_push_away_csv,
    write_report_csv,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    PRESET_NAMES,
    REFERENCE_PARAMS_MILLIONS,
    ResolvedConfig,
    load_corpus_spec,
    load_decode_settings,
    render_flat_config,
    resolve_config,
    resolve_preset,
)
from .corpus import generate_toy_corpus, load_utterances, read_manifest
from .decode import decode_corpus, evaluate as evaluate_hypotheses, score_corpus, write_cer_csv, write_hypotheses
from .errors import BRSTError, ConfigError, InputError
from .model import Vocabulary, build_model, count_params, load_partial_checkpoint
from .train import run_training

app = typer.Typer(help="Block-reusing CTC-attention speech Transformer toolkit.")
console = Console()
logger = logging.getLogger("brst")

THREADS_ENV = "BRST_THREADS"
DECODE_METHODS = ("cg", "cp", "att", "att-re")
ANALYZE_MODES = ("horizontal", "vertical")


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def threads_from_env() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, threads)


@contextmanager
def reported_errors() -> Iterator[None]:
    """Turn package errors into a console message and exit code (2 usage, 1 runtime)."""

    try:
        yield
    except (ConfigError, InputError) as exc:
        console.print(f"[bold red]error:[/bold red] {exc}")
        raise typer.Exit(code=2) from exc
    except BRSTError as exc:
        console.print(f"[bold red]failed:[/bold red] {exc}")
        raise typer.Exit(code=1) from exc


@app.callback()
def main(
    verbose: bool = typer.Option(True, "--verbose/--quiet", help="Log progress at INFO level."),
) -> None:
    configure_logging(verbose)


@app.command()
def train(
    manifest: Path = typer.Option(..., "--manifest", help="Training manifest (utt_id, path, transcript)."),
    out: Path = typer.Option(..., "--out", help="Directory for checkpoints, metrics and the config snapshot."),
    preset: Optional[str] = typer.Option(None, "--preset", help=f"One of: {', '.join(PRESET_NAMES)}."),
    config: Optional[Path] = typer.Option(None, "--config", help="Flat key=value configuration file."),
    scale: Optional[str] = typer.Option(None, "--scale", help="Preset scale: full or toy."),
    ctc_weight: Optional[float] = typer.Option(None, "--lambda", help="Weight of the CTC objective."),
    grad_clip: Optional[float] = typer.Option(None, "--grad-clip", help="Global gradient-norm clip."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for init, data order and masking."),
    max_steps: Optional[int] = typer.Option(None, "--max-steps", help="Optimizer steps to run."),
    init: Optional[Path] = typer.Option(None, "--init", help="Start from this checkpoint (e.g. a warm start)."),
    resume: bool = typer.Option(False, "--resume", help="Continue from the latest checkpoint in --out."),
) -> None:
    """Train a model on a manifest."""

    with reported_errors():
        train_overrides = {
            key: value
            for key, value in {
                "ctc_weight": ctc_weight,
                "grad_clip": grad_clip,
                "seed": seed,
                "max_steps": max_steps,
            }.items()
            if value is not None
        }
        resolved = resolve_config(config, preset, scale, train_overrides=train_overrides)
        entries = read_manifest(manifest)
        init_params = load_checkpoint(init).params if init else None
        vocab = init_params.vocab if init_params else Vocabulary.from_transcripts(e.transcript for e in entries)
        if vocab.size != resolved.model.vocab_size:
            logger.info("Using vocab_size=%d from the corpus", vocab.size)
            resolved = ResolvedConfig(
                preset=resolved.preset,
                scale=resolved.scale,
                model=resolved.model.updated(vocab_size=vocab.size),
                train=resolved.train,
            )
        if init_params is not None and init_params.config != resolved.model:
            raise ConfigError("--init checkpoint does not match the resolved model configuration")

        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.txt").write_text(render_flat_config(resolved), encoding="utf-8")
        result = run_training(
            entries,
            resolved.train,
            resolved.model,
            out,
            vocab=vocab,
            resume=resume,
            init_params=init_params,
            threads=threads_from_env(),
        )

    last = result.metrics[-1] if result.metrics else None
    console.print("[bold green]Training finished[/bold green]")
    if last is not None:
        console.print(f"step {last.step}: loss {last.loss:.4f} (ctc {last.ctc_loss:.4f}, att {last.att_loss:.4f})")
    console.print(f"Checkpoint stored at {result.final_checkpoint}")


@app.command()
def decode(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Model checkpoint to decode with."),
    manifest: Path = typer.Option(..., "--manifest", help="Manifest of utterances to decode."),
    out: Path = typer.Option(..., "--out", help="Hypothesis file (utt_id, hypothesis, score)."),
    method: str = typer.Option("att-re", "--method", help=f"One of: {', '.join(DECODE_METHODS)}."),
    beam: int = typer.Option(10, "--beam", help="Beam for prefix and attention search."),
    rescore_weight: float = typer.Option(0.3, "--rescore-weight", help="CTC weight in attention rescoring."),
    ctc_nbest: int = typer.Option(10, "--ctc-nbest", help="CTC hypotheses fed to rescoring."),
    max_len: Optional[int] = typer.Option(None, "--max-len", help="Attention search length limit."),
    length_penalty: float = typer.Option(0.0, "--length-penalty", help="Per-token bonus in attention search."),
) -> None:
    """Decode a manifest with cg, cp, att or att-re."""

    if method not in DECODE_METHODS:
        raise typer.BadParameter(f"unknown method {method!r}; choose from {', '.join(DECODE_METHODS)}")
    with reported_errors():
        settings = load_decode_settings(
            method=method,
            beam_size=beam,
            ctc_nbest_size=ctc_nbest,
            rescore_weight=rescore_weight,
            max_len=max_len,
            length_penalty=length_penalty,
        )
        loaded = load_checkpoint(checkpoint)
        entries = read_manifest(manifest)
        if not entries:
            logger.warning("Manifest %s is empty; writing an empty hypothesis file", manifest)
        threads = threads_from_env()
        utterances = load_utterances(
            entries, loaded.params.vocab, bool(loaded.metadata.get("apply_cmvn", True)), threads
        )
        results = decode_corpus(loaded.params, utterances, settings, threads)
        write_hypotheses(out, results)
        partial = sum(r.partial for r in results)
        if partial:
            logger.warning("%d hypotheses hit the length limit before eos", partial)
        references = {e.utt_id: e.transcript for e in entries if e.transcript}
        if references:
            corpus = score_corpus(references, {r.utt_id: r.text for r in results})
            cer_path = out.with_name(out.stem + ".cer.csv")
            write_cer_csv(cer_path, corpus)
            console.print(f"CER {100 * corpus.cer:.2f}% over {corpus.ref_len} characters ({cer_path})")
    console.print(f"Wrote {len(results)} hypotheses to {out}")


@app.command()
def evaluate(
    hyp: Path = typer.Option(..., "--hyp", help="Hypothesis file written by decode."),
    manifest: Path = typer.Option(..., "--manifest", help="Manifest with reference transcripts."),
    out: Path = typer.Option(..., "--out", help="CER summary CSV."),
) -> None:
    """Score a hypothesis file against manifest references."""

    with reported_errors():
        if not hyp.is_file():
            raise ConfigError(f"Hypothesis file {hyp} does not exist.")
        corpus = evaluate_hypotheses(hyp, read_manifest(manifest), out)
    console.print(f"CER {100 * corpus.cer:.2f}% ({corpus.errors} errors / {corpus.ref_len} characters)")


@app.command()
def analyze(
    checkpoint_a: Path = typer.Option(..., "--checkpoint", help="Model to analyze (reference model for horizontal)."),
    manifest: Path = typer.Option(..., "--manifest", help="Evaluation manifest."),
    out: Path = typer.Option(..., "--out", help="Directory for the CSV and SVG reports."),
    mode: str = typer.Option("vertical", "--mode", help="horizontal or vertical."),
    checkpoint_b: Optional[Path] = typer.Option(None, "--other", help="Second model for horizontal mode."),
    max_rows: Optional[int] = typer.Option(2000, "--max-rows", help="Row budget per site (seeded subsample)."),
    seed: int = typer.Option(0, "--seed", help="Seed of the row subsample."),
    threshold: float = typer.Option(
        DEFAULT_LINEARITY_THRESHOLD, "--threshold", help="Vertical CKA at which a site counts as linear."
    ),
) -> None:
    """CKA similarity reports (CSV + SVG)."""

    if mode not in ANALYZE_MODES:
        raise typer.BadParameter(f"unknown mode {mode!r}; choose from {', '.join(ANALYZE_MODES)}")
    if mode == "horizontal" and checkpoint_b is None:
        raise typer.BadParameter("horizontal mode needs --other")
    with reported_errors():
        entries = read_manifest(manifest)
        threads = threads_from_env()
        first = load_checkpoint(checkpoint_a)
        utterances = load_utterances(
            entries, first.params.vocab, bool(first.metadata.get("apply_cmvn", True)), threads
        )
        dump_a = dump_activations(first.params, utterances, max_rows, seed, tag=checkpoint_a.stem)
        out.mkdir(parents=True, exist_ok=True)
        if mode == "horizontal":
            second = load_checkpoint(checkpoint_b)
            dump_b = dump_activations(second.params, utterances, max_rows, seed, tag=checkpoint_b.stem)
            report = horizontal_similarity(dump_a, dump_b)
            write_push_away_csv(out / "push_away.csv", [report])
            title = "horizontal similarity"
        else:
            report = vertical_similarity(dump_a)
            flags = linearity_flags(report, threshold)
            with (out / "linearity.csv").open("w", encoding="utf-8", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(["site", "approximately_linear"])
                writer.writerows([site, int(flag)] for site, flag in flags.items())
            console.print(f"{sum(flags.values())} of {len(flags)} sites at or above CKA {threshold}")
            title = "vertical similarity"
        write_report_csv(out / "cka.csv", [report])
        plot_reports(out / "cka.svg", [report], title)
    console.print(f"Reports written to {out}")


def _params_table(title: str, rows: list[tuple[str, dict[str, int], int]], baseline: int | None) -> Table:
    table = Table(title=title)
    table.add_column("model")
    table.add_column("encoder blocks", justify="right")
    table.add_column("adapters", justify="right")
    table.add_column("decoder blocks", justify="right")
    table.add_column("total", justify="right")
    table.add_column("vs baseline", justify="right")
    table.add_column("reference (M)", justify="right")
    for name, comps, total in rows:
        ratio = f"{total / baseline:.3f}" if baseline else "-"
        reference = REFERENCE_PARAMS_MILLIONS.get(name)
        table.add_row(
            name,
            f"{comps['encoder_blocks']:,}",
            f"{comps['encoder_adapters'] + comps['decoder_adapters']:,}",
            f"{comps['decoder_blocks']:,}",
            f"{total:,}",
            ratio,
            f"{reference}" if reference is not None else "-",
        )
    return table


@app.command("count-params")
def count_params_command(
    preset: Optional[str] = typer.Option(None, "--preset", help=f"One of: {', '.join(PRESET_NAMES)}."),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Count a saved model instead."),
    all_presets: bool = typer.Option(False, "--all", help="Every preset, with ratios vs baseline."),
    scale: str = typer.Option("full", "--scale", help="Preset scale: full or toy."),
    out: Optional[Path] = typer.Option(None, "--out", help="CSV with the per-component breakdown."),
) -> None:
    """Per-component parameter counts."""

    with reported_errors():
        targets: list[tuple[str, object]] = []
        if checkpoint is not None:
            targets.append((checkpoint.stem, load_checkpoint(checkpoint).params))
        names = list(PRESET_NAMES) if all_presets else ([preset] if preset else [])
        if not names and checkpoint is None:
            names = list(PRESET_NAMES)
        targets.extend((name, resolve_preset(name, scale)) for name in names)
        reports = [(name, count_params(target)) for name, target in targets]  # type: ignore[arg-type]
        baseline = count_params(resolve_preset("baseline", scale)).total

    rows = [(name, report.components, report.total) for name, report in reports]
    console.print(_params_table(f"Parameter counts ({scale})", rows, baseline))
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            component_names = [name for name, _ in reports[0][1].rows()] if reports else []
            writer.writerow(["model", *component_names, "ratio_vs_baseline"])
            for name, report in reports:
                writer.writerow(
                    [name, *(count for _, count in report.rows()), f"{report.total / baseline:.6f}"]
                )
        console.print(f"CSV written to {out}")


@app.command("gen-corpus")
def gen_corpus(
    out: Path = typer.Option(..., "--out", help="Directory for features and manifest.tsv."),
    num_utterances: int = typer.Option(100, "--num-utterances"),
    vocab_size: int = typer.Option(30, "--vocab-size", help="Distinct emitting tokens."),
    seed: int = typer.Option(0, "--seed"),
    noise: float = typer.Option(0.1, "--noise", help="Gaussian noise sigma per frame."),
) -> None:
    """Generate the synthetic toy corpus."""

    with reported_errors():
        spec = load_corpus_spec(
            num_utterances=num_utterances, vocab_size=vocab_size, seed=seed, noise_sigma=noise
        )
        try:
            manifest = generate_toy_corpus(spec, out)
        except OSError as exc:
            raise ConfigError(f"cannot write the corpus to {out}: {exc}") from exc
    console.print(f"Manifest written to {manifest}")


@app.command("warm-start")
def warm_start(
    source: Path = typer.Option(..., "--source", help="Trained checkpoint to copy from."),
    preset: str = typer.Option(..., "--preset", help="Target preset, e.g. BRA-E."),
    out: Path = typer.Option(..., "--out", help="Output checkpoint path."),
    scale: str = typer.Option("full", "--scale", help="Scale the target preset's stacking comes from."),
    seed: int = typer.Option(0, "--seed", help="Seed for freshly initialized components."),
) -> None:
    """Initialize a preset from another checkpoint; fresh components are listed."""

    with reported_errors():
        loaded = load_checkpoint(source)
        src = loaded.params.config
        # Widths come from the source so every copied tensor keeps its shape.
        target_cfg = resolve_preset(
            preset,
            scale,
            d_model=src.d_model,
            heads=src.heads,
            ff_dim=src.ff_dim,
            vocab_size=src.vocab_size,
            input_dim=src.input_dim,
            subsampling=src.subsampling,
            dtype=src.dtype,
        )
        target = build_model(target_cfg, seed, loaded.params.vocab)
        params, provenance = load_partial_checkpoint(target, loaded.params)
        save_checkpoint(out, params, 0, {"apply_cmvn": loaded.metadata.get("apply_cmvn", True)})
        record = out.with_name(out.name + ".provenance.json")
        record.write_text(
            json.dumps({"source": str(source), "preset": preset, **provenance.to_dict()}, indent=2),
            encoding="utf-8",
        )
    console.print(
        f"[bold green]Warm start written to {out}[/bold green]: "
        f"{len(provenance.copied)} copied, {len(provenance.fresh)} fresh, {len(provenance.dropped)} dropped"
    )
    for component in provenance.fresh:
        console.print(f"- fresh {component}")


if __name__ == "__main__":
    app()
