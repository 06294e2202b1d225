"""
LSGC - linguistic steganalysis toolkit.

This package provides functionality to:
- Synthesize cover and Huffman-coded stego text from a Markov model
- Filter, balance and split labeled corpora
- Fine-tune a small transformer with LoRA in generation or classification mode
- Score detectors and report training-time savings
"""

__version__ = "1.0.0"

from .app.core.processor import LsgcProcessor
from .app.config import RunConfig, load_run_config

__all__ = [
    "LsgcProcessor",
    "RunConfig",
    "load_run_config",
]
