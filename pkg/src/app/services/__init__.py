"""
LSGC Services Package.

Detector modes, corpus synthesis, data preparation, training, metrics and gradient checks.
"""

from .clsmode import ClassificationDetector
from .genmode import GenerationDetector, PromptTemplate
from .stegsynth import CorpusSynthesizer, MarkovLM

__all__ = [
    "ClassificationDetector",
    "GenerationDetector",
    "PromptTemplate",
    "CorpusSynthesizer",
    "MarkovLM",
]
