"""
Classification-mode detection: instruction plus payload, one forward pass, two-way head.
"""

import logging
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from ..core.numerics import Tensor, cross_entropy, no_grad, softmax
from ..core.tokenizer import PAD, encode
from ..exceptions import ContractError, LabelIndexError, SequenceLengthError
from ..prompts import CLASSIFICATION_INSTRUCTION
from ..schema.schemas import Label

logger = logging.getLogger(__name__)


class ClsInput(BaseModel):
    instruction: str
    payload: str
    token_ids: List[int]
    pad_mask: List[bool]

    @property
    def length(self) -> int:
        return sum(self.pad_mask)


def build_cls_input(instruction: str, payload_text: str, max_len: int = 512) -> ClsInput:
    """BOS + instruction + payload; no description section."""
    ids = encode((instruction + payload_text).encode("utf-8"), add_bos=True)
    if len(ids) > max_len:
        raise SequenceLengthError(
            f"Classification input of {len(ids)} tokens exceeds {max_len}; shorten the payload"
        )
    return ClsInput(instruction=instruction, payload=payload_text, token_ids=ids, pad_mask=[True] * len(ids))


def pad_batch(inputs: Sequence[ClsInput]) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch max length with PAD."""
    if not inputs:
        raise ContractError("Cannot pad an empty batch")
    width = max(item.length for item in inputs)
    ids = np.full((len(inputs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(inputs), width), dtype=bool)
    for row, item in enumerate(inputs):
        n = item.length
        ids[row, :n] = item.token_ids[:n]
        mask[row, :n] = True
    return ids, mask


def _label_index(label: Union[Label, int]) -> int:
    index = label.index if isinstance(label, Label) else int(label)
    if index not in (0, 1):
        raise LabelIndexError(f"Label index must be 0 or 1, got {index}")
    return index


def predict(model, cls_input: ClsInput) -> Tuple[Label, np.ndarray]:
    """
    Label and probability pair for one input.

    Exactly equal logits resolve to cover.
    """
    with no_grad():
        logits = model.forward_sequence_classification(
            np.asarray(cls_input.token_ids), np.asarray(cls_input.pad_mask)
        )
        probs = softmax(logits).data
    return Label.from_index(int(np.argmax(logits.data))), probs


def predict_batch(model, inputs: Sequence[ClsInput]) -> List[Tuple[Label, np.ndarray]]:
    ids, mask = pad_batch(inputs)
    with no_grad():
        logits = model.forward_sequence_classification(ids, mask)
        probs = softmax(logits, axis=-1).data
    return [(Label.from_index(int(np.argmax(row))), p) for row, p in zip(logits.data, probs)]


def cls_loss(model, cls_input: ClsInput, label: Union[Label, int]) -> Tensor:
    logits = model.forward_sequence_classification(
        np.asarray(cls_input.token_ids), np.asarray(cls_input.pad_mask)
    )
    return cross_entropy(logits, _label_index(label))


def cls_batch_loss(model, inputs: Sequence[ClsInput], labels: Sequence[Union[Label, int]]) -> Tensor:
    if len(inputs) != len(labels):
        raise ContractError(f"{len(inputs)} inputs but {len(labels)} labels")
    ids, mask = pad_batch(inputs)
    logits = model.forward_sequence_classification(ids, mask)
    return cross_entropy(logits, np.array([_label_index(label) for label in labels]))


class ClassificationDetector:
    def __init__(self, model, instruction: str = CLASSIFICATION_INSTRUCTION, batch_size: int = 10):
        self.model = model
        self.instruction = instruction
        self.batch_size = batch_size

    def encode(self, text: str) -> ClsInput:
        return build_cls_input(self.instruction, text, self.model.max_seq_len)

    def detect(self, text: str) -> Label:
        label, _ = predict(self.model, self.encode(text))
        return label

    def detect_all(self, texts: Sequence[str]) -> List[Label]:
        labels: List[Label] = []
        for start in range(0, len(texts), self.batch_size):
            batch = [self.encode(text) for text in texts[start:start + self.batch_size]]
            labels.extend(label for label, _ in predict_batch(self.model, batch))
        return labels
