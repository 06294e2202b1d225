"""
Binary checkpoint format.

Layout: the magic bytes ``LSGCCKPT``, an unsigned 64-bit little-endian manifest
length, the manifest as UTF-8 JSON, then the raw little-endian bytes of every
parameter in manifest order.
"""

import json
import logging
import struct
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from ..config import LoraConfig, ModelConfig
from ..exceptions import ContractError, StorageError
from ..schema.schemas import Mode
from .lora import attach_lora
from .model import TransformerLM

logger = logging.getLogger(__name__)

MAGIC = b"LSGCCKPT"
_PRECISIONS = {"float32": "<f4", "float64": "<f8"}


class ParamEntry(BaseModel):
    name: str
    shape: List[int]
    precision: str
    offset: int
    nbytes: int


class CheckpointManifest(BaseModel):
    model: ModelConfig
    lora: Optional[LoraConfig] = None
    mode: Mode
    merged: bool = False
    params: List[ParamEntry]


def save_checkpoint(model: TransformerLM, path: Union[str, Path]) -> Path:
    """
    Write a model, its adapters and head to disk.

    Args:
        model: Model to save
        path: Destination file

    Returns:
        The written path
    """
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.named_parameters():
        precision = np.dtype(tensor.data.dtype).name
        if precision not in _PRECISIONS:
            raise ContractError(f"Unsupported parameter precision {precision} for {name}")
        blob = np.ascontiguousarray(tensor.data, dtype=_PRECISIONS[precision]).tobytes()
        entries.append(ParamEntry(name=name, shape=list(tensor.shape), precision=precision,
                                  offset=offset, nbytes=len(blob)))
        blobs.append(blob)
        offset += len(blob)

    manifest = CheckpointManifest(
        model=model.config,
        lora=model.lora_config,
        mode=model.mode,
        merged=model.merged,
        params=entries,
    )
    header = manifest.model_dump_json().encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
    except OSError as e:
        raise StorageError(f"Could not write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} ({len(entries)} tensors, {offset} bytes)")
    return path


def read_manifest(path: Union[str, Path]) -> CheckpointManifest:
    manifest, _ = _read(Path(path))
    return manifest


def _read(path: Path):
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"Could not read checkpoint {path}: {e}") from e
    if raw[:len(MAGIC)] != MAGIC:
        raise StorageError(f"{path} is not a checkpoint file")
    if len(raw) < len(MAGIC) + 8:
        raise StorageError(f"Checkpoint {path} is truncated before its manifest")
    (length,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        manifest = CheckpointManifest(**json.loads(raw[start:start + length].decode("utf-8")))
    except (ValueError, ValidationError) as e:
        raise StorageError(f"Corrupt checkpoint manifest in {path}: {e}") from e
    unknown = sorted({p.precision for p in manifest.params} - set(_PRECISIONS))
    if unknown:
        raise StorageError(f"Checkpoint {path} uses unsupported precision {', '.join(unknown)}")
    return manifest, memoryview(raw)[start + length:]


def load_checkpoint(path: Union[str, Path]) -> TransformerLM:
    """
    Rebuild a model from a checkpoint file.

    The returned model has the saved head, adapters and merge flag, in eval mode.
    """
    path = Path(path)
    manifest, body = _read(path)

    model = TransformerLM(manifest.model, seed=0, mode=manifest.mode)
    if manifest.lora is not None and not manifest.merged:
        attach_lora(model, manifest.lora)
    model.lora_config = manifest.lora
    model.merged = manifest.merged

    state = {}
    for entry in manifest.params:
        if entry.offset + entry.nbytes > len(body):
            raise StorageError(f"Checkpoint {path} is truncated at {entry.name}")
        chunk = body[entry.offset:entry.offset + entry.nbytes]
        array = np.frombuffer(chunk, dtype=_PRECISIONS[entry.precision]).reshape(entry.shape)
        state[entry.name] = array.astype(np.dtype(entry.precision))
    model.load_state_dict(state)
    return model.eval()
