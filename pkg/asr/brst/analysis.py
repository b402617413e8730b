"""Linear CKA similarity between block representations.

Horizontal similarity compares two models site by site at equal depth;
vertical similarity compares each site with the one feeding it, which flags
blocks that act almost linearly.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np

from . import tensor as T
from .corpus import Utterance
from .errors import DegenerateInputError, InputError
from .model import ModelParams, decode_teacher_forced, encode_batch

logger = logging.getLogger(__name__)

DEFAULT_LINEARITY_THRESHOLD = 0.95
ADAPTER_SUFFIX = "-after-ADM"
_SITE = re.compile(r"^(enc|dec)-(\d+)(-after-ADM)?$")


def _no_variance(raw: np.ndarray, centered: np.ndarray) -> bool:
    # Centering a constant column leaves rounding residue, not exact zeros.
    return bool(np.linalg.norm(centered) <= 1e-12 * max(1.0, np.linalg.norm(raw)))


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    """||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F) with column-centered inputs."""

    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise InputError(f"linear_cka expects matrices, got {X.shape} and {Y.shape}")
    if X.shape[0] != Y.shape[0]:
        raise InputError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise InputError("linear_cka needs at least two rows")
    Xc = X - X.mean(axis=0, keepdims=True)
    Yc = Y - Y.mean(axis=0, keepdims=True)
    if _no_variance(X, Xc) or _no_variance(Y, Yc):
        raise DegenerateInputError("an input has no variance (all rows identical)")
    cross = np.linalg.norm(Yc.T @ Xc)
    return float(cross * cross / (np.linalg.norm(Xc.T @ Xc) * np.linalg.norm(Yc.T @ Yc)))


# Dumps --------------------------------------------------------------------------------


def parse_site(label: str) -> tuple[str, int, bool]:
    match = _SITE.match(label)
    if not match:
        raise InputError(f"not a site label: {label!r}")
    return match.group(1), int(match.group(2)), match.group(3) is not None


@dataclass
class ActivationDump:
    """Per-site activation rows for one model over one evaluation set.

    Encoder sites share one row count (frames) and decoder sites another
    (teacher-forced token positions).
    """

    tag: str
    sites: list[tuple[str, np.ndarray]]

    def __post_init__(self) -> None:
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise InputError(f"duplicate site labels in dump {self.tag!r}")

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.sites]

    def site(self, label: str) -> np.ndarray:
        for name, rows in self.sites:
            if name == label:
                return rows
        raise InputError(f"dump {self.tag!r} has no site {label!r}")

    def has(self, label: str) -> bool:
        return label in self.labels

    def side(self, side: str) -> list[str]:
        return [label for label in self.labels if label.startswith(f"{side}-")]

    def depths(self, side: str) -> list[int]:
        return sorted({d for s, d, adm in map(parse_site, self.side(side)) if not adm and d > 0})


def _subsample(num_rows: int, max_rows: int | None, seed: int) -> np.ndarray | None:
    if max_rows is None or num_rows <= max_rows:
        return None
    return np.sort(np.random.default_rng(seed).choice(num_rows, size=max_rows, replace=False))


def dump_activations(
    params: ModelParams,
    utterances: Sequence[Utterance],
    max_rows: int | None = None,
    seed: int = 0,
    tag: str = "",
) -> ActivationDump:
    """Forward every utterance, keeping each site's valid rows.

    Rows are concatenated over utterances and, when more than ``max_rows``
    exist, subsampled with the same seeded index set at every site of a side.
    """

    if not utterances:
        raise InputError("the evaluation set is empty")
    collected: dict[str, list[np.ndarray]] = {}
    sos = params.vocab.sos
    with T.no_grad():
        for utt in utterances:
            enc = encode_batch(params, [utt.features], capture=True)
            length = int(enc.lengths[0])
            for label, value in enc.captures:
                collected.setdefault(label, []).append(value.data[0, :length])
            dec = decode_teacher_forced(params, enc.hidden, enc.mask, [[sos, *utt.tokens]], capture=True)
            for label, value in dec.captures:
                collected.setdefault(label, []).append(value.data[0, : len(utt.tokens) + 1])

    sites = [(label, np.concatenate(parts, axis=0)) for label, parts in collected.items()]
    for side, offset in (("enc", 0), ("dec", 1)):
        side_sites = [i for i, (label, _) in enumerate(sites) if label.startswith(f"{side}-")]
        if not side_sites:
            continue
        index = _subsample(sites[side_sites[0]][1].shape[0], max_rows, seed + offset)
        if index is None:
            continue
        for i in side_sites:
            sites[i] = (sites[i][0], sites[i][1][index])
    logger.debug("Dumped %d sites for %s", len(sites), tag or "model")
    return ActivationDump(tag=tag, sites=sites)


# Reports ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class CKAPair:
    site_a: str
    site_b: str
    cka: float
    depth: int
    kind: str


@dataclass
class CKAReport:
    """CKA values per site pair, in depth order, plus push-away numbers per depth."""

    label: str
    pairs: list[CKAPair] = field(default_factory=list)
    push_away: dict[str, float] = field(default_factory=dict)

    def values(self, kind: str | None = None) -> list[float]:
        return [p.cka for p in self.pairs if kind is None or p.kind == kind]


def pair_label(tag_a: str, tag_b: str) -> str:
    return f"{tag_a}-{tag_b}"


def horizontal_similarity(dump_a: ActivationDump, dump_b: ActivationDump) -> CKAReport:
    """CKA of same-depth sites of two models.

    When ``dump_b`` has adapter sites, each depth also gets cka(a block,
    b after-adapter) and the push-away number |block - after-adapter|.
    """

    report = CKAReport(label=pair_label(dump_a.tag, dump_b.tag))
    for side in ("enc", "dec"):
        depths_a, depths_b = dump_a.depths(side), dump_b.depths(side)
        if depths_a != depths_b:
            raise InputError(
                f"{side} depth mismatch: {dump_a.tag!r} has {len(depths_a)} sites, "
                f"{dump_b.tag!r} has {len(depths_b)}"
            )
        for depth in depths_a:
            label = f"{side}-{depth}"
            reference = dump_a.site(label)
            block = linear_cka(reference, dump_b.site(label))
            report.pairs.append(CKAPair(label, label, block, depth, f"{side}-block"))
            adapted = label + ADAPTER_SUFFIX
            if dump_b.has(adapted):
                after = linear_cka(reference, dump_b.site(adapted))
                report.pairs.append(CKAPair(label, adapted, after, depth, f"{side}-adapter"))
                report.push_away[label] = abs(block - after)
    return report


def vertical_similarity(dump: ActivationDump) -> CKAReport:
    """CKA between every site and the site that feeds it, in depth order.

    A pair takes the depth of its later site, so a block and its adapter share one depth.
    """

    report = CKAReport(label=dump.tag)
    for side in ("enc", "dec"):
        labels = dump.side(side)
        for before, after in zip(labels, labels[1:]):
            _, depth, is_adapter = parse_site(after)
            value = linear_cka(dump.site(before), dump.site(after))
            kind = f"{side}-adapter" if is_adapter else f"{side}-block"
            report.pairs.append(CKAPair(before, after, value, depth, kind))
    return report


def linearity_flags(report: CKAReport, threshold: float = DEFAULT_LINEARITY_THRESHOLD) -> dict[str, bool]:
    """Flag each output site whose vertical CKA reaches ``threshold``."""

    if not 0.0 < threshold <= 1.0:
        raise InputError(f"threshold must lie in (0, 1], got {threshold}")
    return {pair.site_b: pair.cka >= threshold for pair in report.pairs}


# Files --------------------------------------------------------------------------------------


def write_report_csv(path: Path, reports: Sequence[CKAReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["series", "site_a", "site_b", "cka"])
        for report in reports:
            for pair in report.pairs:
                writer.writerow([report.label, pair.site_a, pair.site_b, f"{pair.cka:.12f}"])


def write_push_away_csv(path: Path, reports: Sequence[CKAReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["series", "site", "push_away"])
        for report in reports:
            for site, value in report.push_away.items():
                writer.writerow([report.label, site, f"{value:.12f}"])


def plot_reports(path: Path, reports: Sequence[CKAReport], title: str) -> None:
    """Line chart with depth on x and CKA on y; adapter series are dotted."""

    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for report in reports:
        kinds = dict.fromkeys(p.kind for p in report.pairs)
        for kind in kinds:
            pairs = [p for p in report.pairs if p.kind == kind]
            ax.plot(
                [p.depth for p in pairs],
                [p.cka for p in pairs],
                linestyle=":" if kind.endswith("adapter") else "-",
                marker="o",
                markersize=3,
                label=f"{report.label} ({kind})",
            )
    ax.set_xlabel("depth")
    ax.set_ylabel("linear CKA")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)


__all__ = [
    "DEFAULT_LINEARITY_THRESHOLD",
    "linear_cka",
    "parse_site",
    "ActivationDump",
    "dump_activations",
    "CKAPair",
    "CKAReport",
    "pair_label",
    "horizontal_similarity",
    "vertical_similarity",
    "linearity_flags",
    "write_report_csv",
    "write_push_away_csv",
    "plot_reports",
]
