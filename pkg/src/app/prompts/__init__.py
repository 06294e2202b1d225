"""
Prompt wording and template loading for both detection modes.
"""

from pathlib import Path
from typing import Union

from ..config import Config
from ..exceptions import StorageError
from .steganalysis import CLASSIFICATION_INSTRUCTION, STEGANALYSIS_DESCRIPTION, STEGANALYSIS_INSTRUCTION

TEMPLATE_DIR = Config.TEMPLATE_DIR


def read_template(path: Union[str, Path, None] = None) -> str:
    """Read a template file; None selects the bundled default."""
    path = Path(path) if path else Config.DEFAULT_TEMPLATE_FILE
    if not path.exists() and (TEMPLATE_DIR / path.name).exists():
        path = TEMPLATE_DIR / path.name
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Could not read prompt template {path}: {e}") from e


__all__ = [
    "CLASSIFICATION_INSTRUCTION",
    "STEGANALYSIS_DESCRIPTION",
    "STEGANALYSIS_INSTRUCTION",
    "TEMPLATE_DIR",
    "read_template",
]
