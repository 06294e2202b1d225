"""
LSGC App Package.

Contains the numerics, model, data pipeline and training logic.
"""

from .core.processor import LsgcProcessor
from .config import Config, RunConfig, load_run_config

__all__ = [
    "LsgcProcessor",
    "Config",
    "RunConfig",
    "load_run_config",
]
