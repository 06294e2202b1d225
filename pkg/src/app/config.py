import configparser
import hashlib
import json
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError, StorageError
from .schema.schemas import Mode

load_dotenv()

PACKAGE_DIR = Path(__file__).parent


class Config:
    # Runtime
    LOG_LEVEL = os.getenv("LSGC_LOG_LEVEL", "INFO")
    THREADS = max(1, int(os.getenv("LSGC_THREADS", "1")))
    OUTPUT_DIR = os.getenv("LSGC_OUTPUT_DIR", "runs")
    BUILD_ID = os.getenv("LSGC_BUILD_ID", "")

    # Vocabulary
    PAD_ID = 256
    BOS_ID = 257
    EOS_ID = 258
    VOCAB_SIZE = 259

    # Bundled assets
    SEED_CORPUS_FILE = PACKAGE_DIR / "data" / "seed_corpus.txt"
    TEMPLATE_DIR = PACKAGE_DIR / "prompts" / "templates"
    DEFAULT_TEMPLATE_FILE = TEMPLATE_DIR / "default.txt"

    # Published training times in minutes, used as the reference row of timing reports
    REFERENCE_TIMES_MINUTES = {
        "GS-Llama": 33.72,
        "LSGC-G": 28.95,
        "LSGC-C": 14.34,
    }


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


MODEL_PRESETS: Dict[str, Dict[str, int]] = {
    "tiny": {"n_layers": 2, "n_heads": 2, "d_model": 64, "d_ff": 256, "max_seq_len": 512},
    "default": {"n_layers": 4, "n_heads": 4, "d_model": 128, "d_ff": 512, "max_seq_len": 512},
}


class ModelConfig(_Section):
    n_layers: int = Field(default=4, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_model: int = Field(default=128, ge=1)
    d_ff: int = Field(default=512, ge=1)
    vocab_size: int = Config.VOCAB_SIZE
    max_seq_len: int = Field(default=512, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def check_heads(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size != Config.VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {Config.VOCAB_SIZE}")
        return self

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise ConfigurationError(f"Unknown model preset '{name}', choose from {sorted(MODEL_PRESETS)}")
        return cls(**{**MODEL_PRESETS[name], **overrides})


LORA_TARGETS = ("q", "k", "v", "o", "fc", "proj")


class LoraConfig(_Section):
    r: int = Field(default=64, ge=1)
    lora_alpha: Optional[float] = None
    lora_dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    targets: List[str] = Field(default_factory=lambda: ["q", "v"])
    seed: int = 0

    @field_validator("targets", mode="before")
    @classmethod
    def split_targets(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def defaults(self):
        if self.lora_alpha is None:
            self.lora_alpha = 2.0 * self.r
        if not self.lora_alpha > 0:
            raise ValueError("lora_alpha must be positive")
        unknown = [t for t in self.targets if t not in LORA_TARGETS]
        if unknown:
            raise ValueError(f"unknown LoRA targets {unknown}; known: {list(LORA_TARGETS)}")
        return self

    @property
    def scale(self) -> float:
        return float(self.lora_alpha) / self.r


class TrainConfig(_Section):
    batch_size: int = Field(default=10, ge=1)
    lr: float = Field(default=5e-5, gt=0.0)
    epochs: int = Field(default=5, ge=1)
    beta1: float = Field(default=0.9, gt=0.0, lt=1.0)
    beta2: float = Field(default=0.999, gt=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    grad_clip: float = Field(default=1.0, gt=0.0)
    seed: int = 0
    mode: Mode = Mode.CLASSIFICATION
    repeats: int = Field(default=1, ge=1)

    @field_validator("mode", mode="before")
    @classmethod
    def parse_mode(cls, value):
        return Mode.parse(value) if isinstance(value, str) else value


class GenerationBudget(_Section):
    max_new_tokens: int = Field(default=16, ge=1)
    temperature: float = Field(default=0.0, ge=0.0)

    @field_validator("temperature")
    @classmethod
    def greedy_only(cls, value: float) -> float:
        if value != 0.0:
            raise ValueError("only greedy decoding (temperature 0) is supported")
        return value


class GenerationSettings(_Section):
    template: Optional[str] = None
    description: Optional[str] = None
    instruction: Optional[str] = None
    max_new_tokens: int = Field(default=16, ge=1)

    @field_validator("description", "instruction", mode="before")
    @classmethod
    def unescape(cls, value):
        if isinstance(value, str):
            return value.encode("utf-8").decode("unicode_escape")
        return value

    @property
    def budget(self) -> GenerationBudget:
        return GenerationBudget(max_new_tokens=self.max_new_tokens)

    @property
    def template_path(self) -> Path:
        return Path(self.template) if self.template else Config.DEFAULT_TEMPLATE_FILE


class ClassificationSettings(_Section):
    instruction: str = "Is it stego?\n"

    @field_validator("instruction", mode="before")
    @classmethod
    def unescape(cls, value):
        if isinstance(value, str):
            return value.encode("utf-8").decode("unicode_escape")
        return value


class SynthConfig(_Section):
    n_cover: int = Field(default=1000, ge=0)
    n_stego: int = Field(default=1000, ge=0)
    min_length: int = Field(default=48, ge=1)
    max_length: int = Field(default=80, ge=1)
    dials: List[Optional[int]] = Field(default_factory=lambda: [None, 3, 1])
    mix: bool = False
    order: int = Field(default=3, ge=1, le=6)
    smoothing: float = Field(default=0.05, gt=0.0)
    seed: int = 0

    @field_validator("dials", mode="before")
    @classmethod
    def parse_dials(cls, value):
        items = _split_list(value)
        parsed = []
        for item in items:
            if item is None or (isinstance(item, str) and item.lower() == "full"):
                parsed.append(None)
            else:
                parsed.append(int(item))
        return parsed

    @model_validator(mode="after")
    def check_lengths(self):
        if self.min_length > self.max_length:
            raise ValueError("min_length must not exceed max_length")
        if self.min_length < self.order:
            raise ValueError("min_length must be at least the Markov order")
        if any(d is not None and d < 0 for d in self.dials):
            raise ValueError("dial exponents must be non-negative")
        return self


class FilterRules(_Section):
    min_len: int = Field(default=16, ge=0)
    max_len: int = Field(default=400, ge=1)
    min_printable: float = Field(default=0.95, ge=0.0, le=1.0)


class SplitSpec(_Section):
    ratios: Tuple[int, int, int] = (6, 2, 2)
    seed: int = 0
    n_per_class: Optional[int] = 1000

    @field_validator("ratios", mode="before")
    @classmethod
    def parse_ratios(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(":", ",").split(",") if part.strip())
        return value

    @field_validator("n_per_class", mode="before")
    @classmethod
    def parse_n(cls, value):
        if isinstance(value, str) and value.lower() in ("", "none", "all"):
            return None
        return value


class PretrainConfig(_Section):
    steps: int = Field(default=300, ge=0)
    lr: float = Field(default=1e-3, gt=0.0)
    window: int = Field(default=128, ge=2)
    batch_size: int = Field(default=8, ge=1)
    seed: int = 0


class AblationConfig(_Section):
    r_values: List[int] = Field(default_factory=lambda: [2, 4, 8])
    presets: List[str] = Field(default_factory=lambda: ["default"])
    modes: List[Mode] = Field(default_factory=lambda: [Mode.GENERATION, Mode.CLASSIFICATION])

    @field_validator("r_values", "presets", mode="before")
    @classmethod
    def split_values(cls, value):
        return _split_list(value)

    @field_validator("modes", mode="before")
    @classmethod
    def parse_modes(cls, value):
        return [Mode.parse(m) if isinstance(m, str) else m for m in _split_list(value)]


class PathSettings(_Section):
    base_checkpoint: Optional[str] = None
    splits_dir: Optional[str] = None


class RunConfig(_Section):
    preset: str = "default"
    model: ModelConfig = Field(default_factory=ModelConfig)
    lora: LoraConfig = Field(default_factory=LoraConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    generation: GenerationSettings = Field(default_factory=GenerationSettings)
    classification: ClassificationSettings = Field(default_factory=ClassificationSettings)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    filter: FilterRules = Field(default_factory=FilterRules)
    split: SplitSpec = Field(default_factory=SplitSpec)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    paths: PathSettings = Field(default_factory=PathSettings)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def with_mode(self, mode: Mode) -> "RunConfig":
        return self.model_copy(update={"train": self.train.model_copy(update={"mode": mode})})

    def with_seed(self, seed: int) -> "RunConfig":
        """Route one seed to every seeded section."""
        return self.model_copy(
            update={
                "train": self.train.model_copy(update={"seed": seed}),
                "lora": self.lora.model_copy(update={"seed": seed}),
                "synth": self.synth.model_copy(update={"seed": seed}),
                "split": self.split.model_copy(update={"seed": seed}),
                "pretrain": self.pretrain.model_copy(update={"seed": seed}),
            }
        )


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a run configuration.

    Reads a line-oriented ``key = value`` file with sections. Missing sections
    and keys fall back to defaults; unknown sections or keys are rejected.

    Args:
        path: Config file path, or None for all defaults

    Returns:
        Validated RunConfig
    """
    if path is None:
        return RunConfig()

    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")

    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except (configparser.Error, OSError) as e:
        raise StorageError(f"Could not read config {path}: {e}") from e

    sections: Dict[str, Dict[str, str]] = {}
    top_level: Dict[str, str] = {}
    known = set(RunConfig.model_fields) - {"preset"}
    for name in parser.sections():
        if name == "run":
            top_level.update(parser[name])
            continue
        if name not in known:
            raise ConfigurationError(f"Unknown config section [{name}] in {path}")
        sections[name] = dict(parser[name])

    preset = top_level.pop("preset", "default")
    if top_level:
        raise ConfigurationError(f"Unknown keys in [run]: {sorted(top_level)}")

    try:
        model_values = {**ModelConfig.preset(preset).model_dump(), **sections.pop("model", {})}
        return RunConfig(preset=preset, model=ModelConfig(**model_values), **sections)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid config {path}: {e}") from e
