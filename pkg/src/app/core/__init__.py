"""
LSGC Core Package.

Autodiff numerics, the byte tokenizer, the transformer, LoRA, checkpoints and the pipeline processor.
"""

from .model import TransformerLM
from .processor import LsgcProcessor

__all__ = [
    "TransformerLM",
    "LsgcProcessor",
]
