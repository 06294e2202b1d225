"""
Steganalysis Schema Package.

Contains the pydantic records shared by the corpus, training and report layers.
"""

from .schemas import (
    AblationRow,
    BenchmarkReport,
    Confusion,
    EvaluationResult,
    Label,
    LabeledExample,
    MetricRow,
    Mode,
    RejectionEntry,
    Report,
    RunManifest,
    SeedSummary,
    StegoRecord,
    TimingRow,
    TrainRunStats,
    Verdict,
)

__all__ = [
    "AblationRow",
    "BenchmarkReport",
    "Confusion",
    "EvaluationResult",
    "Label",
    "LabeledExample",
    "MetricRow",
    "Mode",
    "RejectionEntry",
    "Report",
    "RunManifest",
    "SeedSummary",
    "StegoRecord",
    "TimingRow",
    "TrainRunStats",
    "Verdict",
]
