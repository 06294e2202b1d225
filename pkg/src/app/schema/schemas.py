from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator


class Label(str, Enum):
    COVER = "cover"
    STEGO = "stego"

    @property
    def index(self) -> int:
        return 0 if self is Label.COVER else 1

    @classmethod
    def from_index(cls, index: int) -> "Label":
        return cls.COVER if index == 0 else cls.STEGO


class Verdict(str, Enum):
    """A detector's answer; generation mode may fail to produce a label."""

    COVER = "cover"
    STEGO = "stego"
    UNPARSEABLE = "unparseable"


class Mode(str, Enum):
    GENERATION = "generation"
    CLASSIFICATION = "classification"

    @classmethod
    def parse(cls, value: str) -> "Mode":
        aliases = {"gen": cls.GENERATION, "cls": cls.CLASSIFICATION}
        if value in aliases:
            return aliases[value]
        return cls(value)

    @property
    def short(self) -> str:
        return "gen" if self is Mode.GENERATION else "cls"


class LabeledExample(BaseModel):
    text: str
    label: Label
    source: str = ""
    bpw: float = Field(default=0.0, ge=0.0)
    record_id: Optional[int] = None

    @property
    def payload(self) -> bytes:
        return self.text.encode("utf-8")


class StegoRecord(BaseModel):
    text: str
    bits_embedded: int = Field(ge=0)
    token_count: int = Field(ge=1)
    dial: Optional[int] = None

    @property
    def bpw(self) -> float:
        return self.bits_embedded / self.token_count


class RejectionEntry(BaseModel):
    record_id: int
    rule: str


class Confusion(BaseModel):
    """Confusion counts with stego as the positive class."""

    tp: int = Field(default=0, ge=0)
    tn: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(
            tp=self.tp + other.tp,
            tn=self.tn + other.tn,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
        )


class EvaluationResult(BaseModel):
    mode: Mode
    confusion: Confusion
    accuracy: float
    f1: float
    parse_rate: float = 1.0
    forward_passes: int = 0
    predictions: List[Verdict] = Field(default_factory=list)


class TrainRunStats(BaseModel):
    mode: Mode
    seed: int
    epoch_losses: List[float] = Field(default_factory=list)
    epoch_seconds: List[float] = Field(default_factory=list)
    val_accuracies: List[float] = Field(default_factory=list)
    best_epoch: int = 0
    forward_passes: int = 0
    scored_positions: int = 0
    trainable_params: int = 0
    final_confusion: Optional[Confusion] = None
    parse_rate: Optional[float] = None

    @property
    def total_seconds(self) -> float:
        return float(sum(self.epoch_seconds))

    @field_validator("epoch_losses")
    @classmethod
    def _finite_losses(cls, values: List[float]) -> List[float]:
        for value in values:
            if value != value or value in (float("inf"), float("-inf")):
                raise ValueError("epoch loss must be finite")
        return values


class SeedSummary(BaseModel):
    mean: float
    low: float
    high: float
    values: List[float]


class MetricRow(BaseModel):
    dataset: str
    mode: Mode
    confusion: Confusion
    accuracy: float
    f1: float
    seeds: Optional[int] = None
    accuracy_range: Optional[SeedSummary] = None
    f1_range: Optional[SeedSummary] = None


class TimingRow(BaseModel):
    label: str
    seconds: float = Field(gt=0.0)


class AblationRow(BaseModel):
    preset: str
    r: int
    mode: Mode
    accuracy: float
    f1: float
    trainable_params: int


class BenchmarkReport(BaseModel):
    generation_seconds: float = Field(gt=0.0)
    classification_seconds: float = Field(gt=0.0)
    reduction: float
    epochs: int
    examples: int
    generation_forward_passes: int = 0
    classification_forward_passes: int = 0
    generation_scored_positions: int = 0


class Report(BaseModel):
    title: str
    seed: int
    config_hash: str
    f1_note: str = "F1 is the stego (positive) class F1."
    metrics: List[MetricRow] = Field(default_factory=list)
    timings: List[TimingRow] = Field(default_factory=list)
    reference_timings: List[TimingRow] = Field(default_factory=list)
    ablation: List[AblationRow] = Field(default_factory=list)
    benchmark: Optional[BenchmarkReport] = None
    notes: Dict[str, str] = Field(default_factory=dict)


class RunManifest(BaseModel):
    command: str
    config_path: Optional[str] = None
    seed: int
    build_id: str
    output_dir: str
    started_at: datetime
    finished_at: Optional[datetime] = None
    arguments: Dict[str, str] = Field(default_factory=dict)
    config_hash: Optional[str] = None
