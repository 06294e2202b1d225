"""
Confusion-based scoring, seed aggregation and report rendering.

Stego is the positive class throughout.
"""

import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import Config
from ..exceptions import ContractError, StorageError
from ..schema.schemas import (
    AblationRow,
    Confusion,
    EvaluationResult,
    Label,
    MetricRow,
    Mode,
    Report,
    SeedSummary,
    TimingRow,
    Verdict,
)

logger = logging.getLogger(__name__)

Prediction = Union[Verdict, Label, str]


def _as_verdict(value: Prediction) -> Verdict:
    return Verdict(value.value if isinstance(value, (Verdict, Label)) else value)


def confusion(preds: Sequence[Prediction], labels: Sequence[Union[Label, str]]) -> Confusion:
    """Count outcomes; an unparseable prediction counts as the wrong class."""
    if len(preds) != len(labels):
        raise ContractError(f"{len(preds)} predictions but {len(labels)} labels")
    tp = tn = fp = fn = 0
    for pred, label in zip(preds, labels):
        verdict = _as_verdict(pred)
        truth = Label(label.value if isinstance(label, Label) else label)
        if truth is Label.STEGO:
            if verdict is Verdict.STEGO:
                tp += 1
            else:
                fn += 1
        else:
            if verdict is Verdict.COVER:
                tn += 1
            else:
                fp += 1
    return Confusion(tp=tp, tn=tn, fp=fp, fn=fn)


def accuracy(c: Confusion) -> float:
    if c.total == 0:
        raise ContractError("Accuracy of an empty confusion is undefined")
    return (c.tp + c.tn) / c.total


def precision(c: Confusion) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: Confusion) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f1(c: Confusion) -> float:
    """Stego-class F1; 0 when precision + recall is 0."""
    if c.total == 0:
        raise ContractError("F1 of an empty confusion is undefined")
    p, r = precision(c), recall(c)
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def reduction(slow_seconds: float, fast_seconds: float) -> float:
    """Relative time saved, (slow - fast) / slow."""
    if slow_seconds <= 0:
        raise ContractError("Reference time must be positive")
    return (slow_seconds - fast_seconds) / slow_seconds


def format_pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def summarize_seeds(values: Sequence[float]) -> SeedSummary:
    if not values:
        raise ContractError("No values to summarize")
    return SeedSummary(mean=float(np.mean(values)), low=float(min(values)), high=float(max(values)),
                       values=list(values))


def metric_row(dataset: str, result: EvaluationResult) -> MetricRow:
    return MetricRow(dataset=dataset, mode=result.mode, confusion=result.confusion,
                     accuracy=result.accuracy, f1=result.f1)


def seed_row(dataset: str, mode: Mode, results: Sequence[EvaluationResult]) -> MetricRow:
    """Mean accuracy and F1 over repeated runs, with their ranges and the pooled confusion."""
    if not results:
        raise ContractError("No results to aggregate")
    pooled = Confusion()
    for result in results:
        pooled = pooled + result.confusion
    acc = summarize_seeds([r.accuracy for r in results])
    f1s = summarize_seeds([r.f1 for r in results])
    return MetricRow(dataset=dataset, mode=mode, confusion=pooled, accuracy=acc.mean, f1=f1s.mean,
                     seeds=len(results), accuracy_range=acc, f1_range=f1s)


def reference_timings() -> List[TimingRow]:
    return [TimingRow(label=label, seconds=minutes * 60.0)
            for label, minutes in Config.REFERENCE_TIMES_MINUTES.items()]


def reference_reduction() -> float:
    ref = Config.REFERENCE_TIMES_MINUTES
    return reduction(ref["GS-Llama"], ref["LSGC-C"])


def _sorted(report: Report) -> Report:
    mode_order = {Mode.GENERATION: 0, Mode.CLASSIFICATION: 1}
    return report.model_copy(update={
        "metrics": sorted(report.metrics, key=lambda r: (r.dataset, mode_order[r.mode])),
        "ablation": sorted(report.ablation, key=lambda r: (r.preset, r.r, mode_order[r.mode])),
    })


def render_markdown(report: Report) -> str:
    lines = [f"# {report.title}", "", f"- seed: {report.seed}", f"- config hash: {report.config_hash}",
             f"- {report.f1_note}"]
    for key in sorted(report.notes):
        lines.append(f"- {key}: {report.notes[key]}")

    if report.metrics:
        lines += ["", "## Detection", "", "| Dataset | Mode | Acc (%) | F1 (%) | TP | TN | FP | FN | Seeds |",
                  "|---|---|---|---|---|---|---|---|---|"]
        for row in report.metrics:
            acc = format_pct(row.accuracy)
            f1_text = format_pct(row.f1)
            if row.accuracy_range is not None:
                acc += f" [{format_pct(row.accuracy_range.low)}, {format_pct(row.accuracy_range.high)}]"
            if row.f1_range is not None:
                f1_text += f" [{format_pct(row.f1_range.low)}, {format_pct(row.f1_range.high)}]"
            c = row.confusion
            lines.append(f"| {row.dataset} | {row.mode.short} | {acc} | {f1_text} | "
                         f"{c.tp} | {c.tn} | {c.fp} | {c.fn} | {row.seeds or 1} |")

    if report.timings or report.benchmark is not None:
        lines += ["", "## Training time", "", "| Run | Seconds |", "|---|---|"]
        for row in report.timings:
            lines.append(f"| {row.label} | {row.seconds:.2f} |")
        if report.benchmark is not None:
            b = report.benchmark
            lines += [f"| generation | {b.generation_seconds:.2f} |",
                      f"| classification | {b.classification_seconds:.2f} |",
                      "", f"Reduction: {format_pct(b.reduction)}% "
                      f"({b.examples} examples, {b.epochs} epochs; forward passes "
                      f"{b.generation_forward_passes} vs {b.classification_forward_passes}; "
                      f"{b.generation_scored_positions} scored response tokens)"]

    if report.reference_timings:
        lines += ["", "## Reference training time (minutes)", "", "| Method | Minutes |", "|---|---|"]
        for row in report.reference_timings:
            lines.append(f"| {row.label} | {row.seconds / 60.0:.2f} |")
        lines += ["", f"Reference reduction: {format_pct(reference_reduction())}%"]

    if report.ablation:
        presets = sorted({row.preset for row in report.ablation})
        lines += ["", "## LoRA rank", "",
                  "| Preset | r | Params (gen) | G Acc | G F1 | Params (cls) | C Acc | C F1 |",
                  "|---|---|---|---|---|---|---|---|"]
        for preset in presets:
            for r in sorted({row.r for row in report.ablation if row.preset == preset}):
                cells = {row.mode: row for row in report.ablation if row.preset == preset and row.r == r}
                parts = []
                for mode in (Mode.GENERATION, Mode.CLASSIFICATION):
                    row = cells.get(mode)
                    if row is None:
                        parts += ["-", "-", "-"]
                    else:
                        parts += [str(row.trainable_params), format_pct(row.accuracy), format_pct(row.f1)]
                lines.append(f"| {preset} | {r} | " + " | ".join(parts) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: Report, out_dir: Union[str, Path], stem: str = "report") -> Tuple[Path, Path]:
    """
    Write the report as JSON and Markdown.

    Returns:
        (json path, markdown path)
    """
    if not (report.metrics or report.timings or report.ablation or report.benchmark):
        raise ContractError("Report has no statistics")
    report = _sorted(report)
    out_dir = Path(out_dir)
    json_path = out_dir / f"{stem}.json"
    md_path = out_dir / f"{stem}.md"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        md_path.write_text(render_markdown(report), encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Could not write report to {out_dir}: {e}") from e
    logger.info(f"Report written to {json_path} and {md_path}")
    return json_path, md_path


def load_report(path: Union[str, Path]) -> Report:
    try:
        return Report.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise StorageError(f"Could not read report {path}: {e}") from e


def merge_reports(reports: Iterable[Report], title: str = "Merged report",
                  seed: Optional[int] = None) -> Report:
    """Concatenate rows from several reports; provenance comes from the first one."""
    reports = list(reports)
    if not reports:
        raise ContractError("No reports to merge")
    first = reports[0]
    hashes = sorted({r.config_hash for r in reports})
    merged = Report(title=title, seed=first.seed if seed is None else seed, config_hash=",".join(hashes),
                    reference_timings=first.reference_timings)
    for r in reports:
        merged.metrics.extend(r.metrics)
        merged.timings.extend(r.timings)
        merged.ablation.extend(r.ablation)
        if r.benchmark is not None and merged.benchmark is None:
            merged.benchmark = r.benchmark
    return merged
