"""Subset sweeps, missing-count aggregation, ablations and report text."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .config import VARIANT_LABELS, ModelConfig, TrainConfig
from .data import Sample, normalize
from .losses import dsc_metric, labels_to_nested_regions, REGIONS
from .modality import MODALITIES, MODALITY_NAMES, ModalityMask, enumerate_subsets
from .network import ModelParams, encode_modality, fuse_and_decode
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("ET", "TC", "WT")
THRESHOLD = 0.5


@dataclass(frozen=True)
class DscRow:
    mask: ModalityMask
    et: float
    tc: float
    wt: float

    def values(self) -> tuple[float, float, float]:
        return (self.et, self.tc, self.wt)


@dataclass
class DscTable:
    rows: list[DscRow]
    label: str = "mmFormer"

    @property
    def average(self) -> tuple[float, float, float]:
        if not self.rows:
            return (float("nan"),) * 3
        arr = np.array([r.values() for r in self.rows], dtype=np.float64)
        return tuple(float(v) for v in arr.mean(axis=0))

    def row(self, mask) -> DscRow:
        for r in self.rows:
            if r.mask == mask:
                return r
        raise KeyError(str(mask))

    def is_complete(self) -> bool:
        return sorted(r.mask.delta for r in self.rows) == sorted(m.delta for m in enumerate_subsets()) and len(self.rows) == 15


@dataclass
class MissingCountSummary:
    """Mean (ET, TC, WT) DSC per number of missing modalities."""

    means: dict[int, tuple[float, float, float]]
    sizes: dict[int, int] = field(default_factory=dict)

    def region(self, name: str) -> list[float]:
        i = REPORT_COLUMNS.index(name.upper())
        return [self.means[k][i] for k in sorted(self.means)]


def region_dsc(probs: np.ndarray, sample: Sample) -> tuple[float, float, float]:
    """(ET, TC, WT) DSC for ``[3, D, H, W]`` probabilities in region-channel order."""
    pred = probs > THRESHOLD
    targets = labels_to_nested_regions(sample.labels)
    by_region = {r: dsc_metric(pred[i], targets.region(r)) for i, r in enumerate(REGIONS)}
    return by_region["et"], by_region["tc"], by_region["wt"]


def predict_probs(params: ModelParams, cfg: ModelConfig, sample: Sample, masks: Sequence[ModalityMask]) -> list[np.ndarray]:
    """Main-head probabilities of one (normalized) sample under each mask.

    Modality encoders run once; each mask then only gates the fusion and the
    skip features, which is the same computation as a masked forward pass.
    """
    with no_grad():
        encodings = [encode_modality(Tensor(sample.volumes[i][None, None]), params, cfg, m) for i, m in enumerate(MODALITIES)]
        size = sample.extent
        out = []
        for mask in masks:
            gated = [e if mask[m] else None for m, e in zip(MODALITIES, encodings)]
            res = fuse_and_decode(gated, mask, params, cfg, size, with_aux=False)
            out.append(expit(res.main_logits.data[0].astype(np.float64)))
    return out


def evaluate_subsets(
    params: ModelParams,
    dataset: Sequence[Sample],
    cfg: ModelConfig,
    masks: Optional[Sequence[ModalityMask]] = None,
    label: str = "mmFormer",
) -> DscTable:
    """Per-subset DSC averaged over samples (macro average).

    Samples are normalized per modality here; parameters are never modified.
    """
    if not dataset:
        raise ValueError("evaluation set is empty")
    masks = list(masks) if masks is not None else enumerate_subsets()
    scores = np.zeros((len(masks), 3))
    for sample in dataset:
        s = normalize(sample)
        for i, probs in enumerate(predict_probs(params, cfg, s, masks)):
            scores[i] += region_dsc(probs, s)
    scores /= len(dataset)
    rows = [DscRow(m, *map(float, scores[i])) for i, m in enumerate(masks)]
    return DscTable(rows, label)


def aggregate_by_missing_count(table: DscTable) -> MissingCountSummary:
    if not table.is_complete():
        raise ValueError("aggregation needs all 15 modality subsets")
    groups: dict[int, list] = {}
    for r in table.rows:
        groups.setdefault(r.mask.missing_count, []).append(r.values())
    means = {k: tuple(float(v) for v in np.mean(groups[k], axis=0)) for k in sorted(groups)}
    return MissingCountSummary(means, {k: len(groups[k]) for k in sorted(groups)})


def run_ablation(
    train: Sequence[Sample],
    val: Sequence[Sample],
    base: ModelConfig,
    tcfg: TrainConfig,
    variants: Sequence[str] = ("full", "no-intra", "no-inter", "no-aux"),
) -> dict[str, DscTable]:
    """Train each variant from the same seed and sweep all subsets on ``val``."""
    from .train import train_loop

    tables = {}
    for variant in variants:
        cfg = base.with_variant(variant)
        label = VARIANT_LABELS[variant]
        log.info("ablation variant %s", label)
        result = train_loop(train, cfg, tcfg)
        tables[label] = evaluate_subsets(result.params, val, cfg, label=label)
    return tables


# -- reports -------------------------------------------------------------------

def format_report(table: DscTable, fmt: str = "markdown") -> str:
    """Render the table; percentages with two decimals, average row last."""
    avg = table.average
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(MODALITY_NAMES) + list(REPORT_COLUMNS))
        for r in table.rows:
            w.writerow(list(r.mask.flags()) + [f"{v:.2f}" for v in r.values()])
        w.writerow(["Average", "", "", ""] + [f"{v:.2f}" for v in avg])
        return buf.getvalue()
    if fmt == "markdown":
        header = "| " + " | ".join(("F",) + MODALITY_NAMES[1:] + REPORT_COLUMNS) + " |"
        sep = "|" + "---|" * (len(MODALITY_NAMES) + len(REPORT_COLUMNS))
        lines = [f"**{table.label}** DSC [%]", "", header, sep]
        for r in table.rows:
            marks = ["●" if d else "○" for d in r.mask.delta]
            lines.append("| " + " | ".join(marks + [f"{v:.2f}" for v in r.values()]) + " |")
        lines.append("| Average | | | | " + " | ".join(f"{v:.2f}" for v in avg) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(text: str, label: str = "mmFormer") -> DscTable:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != MODALITY_NAMES + REPORT_COLUMNS:
        raise ValueError(f"unexpected report header {header}")
    rows = []
    for rec in reader:
        if not rec or rec[0] == "Average":
            continue
        mask = ModalityMask(tuple(bool(int(v)) for v in rec[:4]))
        rows.append(DscRow(mask, *(float(v) for v in rec[4:7])))
    return DscTable(rows, label)


def format_missing_summary(summary: MissingCountSummary) -> str:
    ks = sorted(summary.means)
    lines = ["| Region | " + " | ".join(str(k) for k in ks) + " |", "|---|" + "---|" * len(ks)]
    for i, name in enumerate(("Enhancing", "Core", "Whole")):
        lines.append(f"| {name} | " + " | ".join(f"{summary.means[k][i]:.2f}" for k in ks) + " |")
    return "\n".join(lines) + "\n"


def format_ablation(tables: dict[str, DscTable]) -> str:
    lines = ["| Methods | Enhancing | Core | Whole |", "|---|---|---|---|"]
    for label, table in tables.items():
        lines.append(f"| {label} | " + " | ".join(f"{v:.2f}" for v in table.average) + " |")
    return "\n".join(lines) + "\n"
