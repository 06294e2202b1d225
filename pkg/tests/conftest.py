import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.app.config import LoraConfig, ModelConfig
from src.app.core.numerics import Tensor, get_tape
from src.app.schema.schemas import Label, LabeledExample


@pytest.fixture(autouse=True)
def clean_tape():
    get_tape().reset()
    yield
    get_tape().reset()


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, max_seq_len=64, dropout=0.0)


@pytest.fixture
def lora_config():
    return LoraConfig(r=2, lora_dropout=0.0, targets=["q", "v"], seed=3)


@pytest.fixture
def toy_examples():
    """Trivially separable data: covers of 'a', stegos of 'z'."""
    covers = [LabeledExample(text="a" * (6 + i % 4), label=Label.COVER, record_id=i) for i in range(10)]
    stegos = [LabeledExample(text="z" * (6 + i % 4), label=Label.STEGO, record_id=10 + i) for i in range(10)]
    return covers + stegos


class ScriptedLM:
    """Stand-in causal LM whose greedy choice at step i is ``script[i]`` (the last entry repeats)."""

    def __init__(self, script, max_seq_len=512, vocab_size=259):
        self.script = list(script)
        self.max_seq_len = max_seq_len
        self.vocab_size = vocab_size
        self.forward_passes = 0

    def forward_causal_lm(self, tokens, pad_mask=None):
        ids = np.asarray(tokens)
        step = min(self.forward_passes, len(self.script) - 1)
        logits = np.zeros((len(ids), self.vocab_size))
        logits[-1, self.script[step]] = 1.0
        self.forward_passes += 1
        return Tensor(logits)


class FixedLogitsClassifier:
    """Stand-in classifier returning the same logits for every row."""

    def __init__(self, logits, max_seq_len=512):
        self.logits = np.asarray(logits, dtype=np.float32)
        self.max_seq_len = max_seq_len
        self.calls = 0

    def forward_sequence_classification(self, tokens, pad_mask=None):
        ids = np.asarray(tokens)
        self.calls += 1
        if ids.ndim == 1:
            return Tensor(self.logits)
        return Tensor(np.tile(self.logits, (ids.shape[0], 1)))


@pytest.fixture
def scripted_lm():
    return ScriptedLM


@pytest.fixture
def fixed_classifier():
    return FixedLogitsClassifier
