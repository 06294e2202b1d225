"""
LSGC CLI Package.

Contains the command-line interface for the steganalysis pipeline.
"""

from .main import main

__all__ = [
    "main",
]
