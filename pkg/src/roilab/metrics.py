"""Per-image and per-class accuracy, ROI-area bucketing and report tables."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

# doubling area ranges for full-resolution photographs (pixels)
FULL_SCALE_EDGES = (0, 1000, 2000, 4000, 8000, 16000, 32000, 64000, 128000, 256000, 500000, 1000000)
# the same doubling scheme scaled to 64x64 images
DESK_EDGES = (0, 64, 128, 256, 512, 1024, 2048, 4096)

METRICS = ("per_class", "per_image")
FOOTER_LABEL = "Average accuracy all sizes"


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    true_label: int
    predicted_label: int
    roi_area: int

    @property
    def correct(self) -> bool:
        return self.true_label == self.predicted_label


def make_records(ids, true_labels, predictions, areas) -> List[EvalRecord]:
    return [EvalRecord(str(i), int(t), int(p), int(a)) for i, t, p, a in zip(ids, true_labels, predictions, areas)]


def accuracy_per_image(records: Sequence[EvalRecord]) -> float:
    """Fraction of records classified correctly; frequent classes weigh more."""
    if not records:
        raise ValueError("accuracy_per_image needs at least one record")
    return sum(r.correct for r in records) / len(records)


def accuracy_per_class(records: Sequence[EvalRecord], num_classes: Optional[int] = None) -> float:
    """Mean over the classes present in ``records`` of each class's accuracy."""
    if not records:
        raise ValueError("accuracy_per_class needs at least one record")
    hits: Dict[int, int] = defaultdict(int)
    totals: Dict[int, int] = defaultdict(int)
    for r in records:
        if num_classes is not None and not 0 <= r.true_label < num_classes:
            raise ValueError(f"record {r.sample_id}: label {r.true_label} outside [0, {num_classes})")
        totals[r.true_label] += 1
        hits[r.true_label] += r.correct
    return float(np.mean([hits[c] / totals[c] for c in sorted(totals)]))


def metric_fn(metric: str):
    if metric == "per_class":
        return accuracy_per_class
    if metric == "per_image":
        return accuracy_per_image
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


@dataclass
class Buckets:
    edges: tuple
    groups: List[List[EvalRecord]]
    out_of_range: List[EvalRecord] = field(default_factory=list)

    def labels(self) -> List[str]:
        return [f"{lo}-{hi}" for lo, hi in zip(self.edges[:-1], self.edges[1:])]


def _check_edges(edges) -> tuple:
    edges = tuple(int(e) for e in edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be strictly ascending with >= 2 entries, got {edges}")
    return edges


def bucketize_by_area(records: Sequence[EvalRecord], edges: Sequence[int]) -> Buckets:
    """Group records into half-open area ranges ``[edges[i], edges[i+1])``.

    Records outside ``[edges[0], edges[-1])`` land in ``out_of_range``.
    """
    edges = _check_edges(edges)
    groups: List[List[EvalRecord]] = [[] for _ in range(len(edges) - 1)]
    out = []
    for r in records:
        i = int(np.searchsorted(edges, r.roi_area, side="right")) - 1
        if 0 <= i < len(groups):
            groups[i].append(r)
        else:
            out.append(r)
    return Buckets(edges, groups, out)


@dataclass
class BucketRow:
    lo: int
    hi: int
    count: int
    values: Dict[str, Optional[float]]

    @property
    def label(self) -> str:
        return f"{self.lo}-{self.hi}"


@dataclass
class BucketedReport:
    metric: str
    variants: List[str]
    edges: tuple
    rows: List[BucketRow]
    footer: Dict[str, float]
    out_of_range: int = 0
    footer_mode: str = "records"


def build_report(
    per_variant: Mapping[str, Sequence[EvalRecord]],
    edges: Sequence[int] = DESK_EDGES,
    metric: str = "per_image",
    num_classes: Optional[int] = None,
    footer_mode: str = "records",
) -> BucketedReport:
    """Bucket-by-area accuracy table, one column per variant.

    The footer is the metric over every record of a variant
    (``footer_mode="records"``) or the plain mean of the non-empty bucket
    values (``footer_mode="buckets"``).
    """
    if not per_variant:
        raise ValueError("build_report needs at least one variant")
    fn = metric_fn(metric)
    if footer_mode not in ("records", "buckets"):
        raise ValueError(f"footer_mode must be 'records' or 'buckets', got {footer_mode!r}")

    def key(recs):
        return sorted((r.sample_id, r.true_label, r.roi_area) for r in recs)

    variants = list(per_variant)
    reference = key(per_variant[variants[0]])
    for v in variants[1:]:
        if key(per_variant[v]) != reference:
            raise ValueError(f"variant {v!r} was evaluated on a different sample set than {variants[0]!r}")

    edges = _check_edges(edges)
    bucketed = {v: bucketize_by_area(per_variant[v], edges) for v in variants}
    kwargs = {"num_classes": num_classes} if metric == "per_class" else {}
    rows = []
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        count = len(bucketed[variants[0]].groups[i])
        values = {v: (fn(bucketed[v].groups[i], **kwargs) if count else None) for v in variants}
        rows.append(BucketRow(lo, hi, count, values))
    if footer_mode == "records":
        footer = {v: fn(list(per_variant[v]), **kwargs) for v in variants}
    else:
        footer = {v: float(np.mean([r.values[v] for r in rows if r.values[v] is not None])) for v in variants}
    return BucketedReport(metric, variants, edges, rows, footer, len(bucketed[variants[0]].out_of_range), footer_mode)


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def render_report(report: BucketedReport, fmt: str = "markdown") -> str:
    """Text rendering: rows are ROI size ranges, columns are variants."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["size_range", "count", *report.variants])
        for row in report.rows:
            writer.writerow([row.label, row.count, *(_fmt(row.values[v]) for v in report.variants)])
        total = sum(r.count for r in report.rows)
        writer.writerow([FOOTER_LABEL, total, *(_fmt(report.footer[v]) for v in report.variants)])
        return buf.getvalue()
    if fmt == "markdown":
        title = {"per_class": "mean accuracy per class", "per_image": "mean accuracy per image"}[report.metric]
        lines = [
            f"Accuracy by ROI size ({title})",
            "",
            "| Region size range in pixels | count | " + " | ".join(report.variants) + " |",
            "|---|---:|" + "---:|" * len(report.variants),
        ]
        for row in report.rows:
            cells = " | ".join(_fmt(row.values[v]) for v in report.variants)
            lines.append(f"| {row.label} | {row.count} | {cells} |")
        total = sum(r.count for r in report.rows)
        cells = " | ".join(_fmt(report.footer[v]) for v in report.variants)
        lines.append(f"| {FOOTER_LABEL} | {total} | {cells} |")
        if report.out_of_range:
            lines.append("")
            lines.append(f"{report.out_of_range} record(s) fell outside [{report.edges[0]}, {report.edges[-1]}).")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}; expected 'csv' or 'markdown'")


def parse_csv_report(text: str) -> Dict[str, Dict[str, Optional[float]]]:
    """Inverse of the CSV rendering: ``{size_range: {variant: value}}``."""
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0][2:]
    return {
        r[0]: {v: (None if cell == "n/a" else float(cell)) for v, cell in zip(header, r[2:])} for r in rows[1:]
    }


def report_filename(metric: str, timestamp: str, ext: str) -> str:
    return f"report_{metric}_{timestamp}.{ext}"
