"""
Generation-mode detection: four-part prompt, greedy decoding until EOS, keyword verdict.
"""

import logging
import re
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from ..config import GenerationBudget, GenerationSettings
from ..core.numerics import Tensor, cross_entropy, no_grad
from ..core.tokenizer import EOS, PAD, decode, encode
from ..exceptions import ContractError, SequenceLengthError
from ..prompts import STEGANALYSIS_DESCRIPTION, STEGANALYSIS_INSTRUCTION, read_template
from ..schema.schemas import Label, Verdict

logger = logging.getLogger(__name__)

_PLACEHOLDERS = ("{description}", "{instruction}", "{input}")
_VERDICT_PATTERN = re.compile(r"cover|stego", re.IGNORECASE)


class PromptTemplate(BaseModel):
    """Rendered sections in prompt order; the payload goes between input_header and response_header."""

    description: str
    instruction: str
    input_header: str
    response_header: str

    @classmethod
    def from_text(cls, text: str, description: str = STEGANALYSIS_DESCRIPTION,
                  instruction: str = STEGANALYSIS_INSTRUCTION) -> "PromptTemplate":
        """
        Parse a template with {description}, {instruction} and {input} placeholders.

        Each placeholder must appear exactly once and in that order.
        """
        positions = []
        for placeholder in _PLACEHOLDERS:
            if text.count(placeholder) != 1:
                raise ContractError(f"Template must contain {placeholder} exactly once")
            positions.append(text.index(placeholder))
        if positions != sorted(positions):
            raise ContractError("Template placeholders must appear as description, instruction, input")

        head, rest = text.split("{description}")
        between, rest = rest.split("{instruction}")
        input_header, response_header = rest.split("{input}")
        return cls(
            description=head + description,
            instruction=between + instruction,
            input_header=input_header,
            response_header=response_header,
        )

    @classmethod
    def from_file(cls, path: Union[str, Path, None] = None, description: Optional[str] = None,
                  instruction: Optional[str] = None) -> "PromptTemplate":
        return cls.from_text(
            read_template(path),
            description=STEGANALYSIS_DESCRIPTION if description is None else description,
            instruction=STEGANALYSIS_INSTRUCTION if instruction is None else instruction,
        )

    @classmethod
    def from_settings(cls, settings: GenerationSettings) -> "PromptTemplate":
        return cls.from_file(settings.template_path, settings.description, settings.instruction)

    def render(self, payload_text: str) -> bytes:
        text = self.description + self.instruction + self.input_header + payload_text + self.response_header
        return text.encode("utf-8")

    def overhead(self) -> int:
        """Prompt tokens excluding the payload, BOS included."""
        return len(self.render("")) + 1


def build_prompt(template: PromptTemplate, payload_text: str, max_seq_len: int = 512,
                 budget: Optional[GenerationBudget] = None) -> List[int]:
    """
    Render and tokenize a prompt ending exactly at the response header.

    Args:
        template: Prompt sections
        payload_text: Text under inspection
        max_seq_len: Model context size
        budget: Generation budget that must still fit after the prompt

    Returns:
        BOS-prefixed token ids
    """
    ids = encode(template.render(payload_text), add_bos=True)
    reserve = budget.max_new_tokens if budget is not None else 0
    if len(ids) + reserve > max_seq_len:
        raise SequenceLengthError(
            f"Prompt of {len(ids)} tokens plus {reserve} new tokens exceeds the {max_seq_len}-token context; "
            f"shorten the payload to at most {max_seq_len - reserve - template.overhead()} bytes"
        )
    return ids


def generate(model, prompt_ids: Sequence[int], budget: GenerationBudget) -> List[int]:
    """
    Greedy decoding: one forward pass per emitted token, stopping after EOS or the budget.

    Returns:
        Generated ids without the prompt
    """
    if len(prompt_ids) > model.max_seq_len:
        raise SequenceLengthError(f"Prompt of {len(prompt_ids)} tokens does not fit {model.max_seq_len}")
    context = list(prompt_ids)
    generated: List[int] = []
    with no_grad():
        while len(generated) < budget.max_new_tokens and len(context) <= model.max_seq_len:
            logits = model.forward_causal_lm(np.asarray(context))
            token = int(np.argmax(logits.data[-1]))
            generated.append(token)
            if token == EOS:
                break
            context.append(token)
    return generated


def parse_label(generated_text: Union[str, bytes]) -> Verdict:
    """First case-insensitive 'cover' or 'stego' wins; neither means unparseable."""
    if isinstance(generated_text, bytes):
        generated_text = generated_text.decode("utf-8", errors="replace")
    match = _VERDICT_PATTERN.search(generated_text)
    if match is None:
        return Verdict.UNPARSEABLE
    return Verdict(match.group(0).lower())


def response_ids(label: Label) -> List[int]:
    return encode(label.value, add_eos=True)


def _with_eos(target_response_ids: Sequence[int]) -> List[int]:
    target = list(target_response_ids)
    if not target or target[-1] != EOS:
        target.append(EOS)
    return target


def genmode_loss(model, prompt_ids: Sequence[int], target_response_ids: Sequence[int]) -> Tensor:
    """Next-token cross-entropy over the response positions and the terminal EOS only."""
    loss, _ = genmode_batch_loss(model, [(prompt_ids, target_response_ids)])
    return loss


def genmode_batch_loss(model, pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> Tuple[Tensor, int]:
    """
    Masked teacher-forcing loss for a right-padded batch of (prompt, response) pairs.

    Returns:
        Mean loss over scored positions and the number of scored positions
    """
    sequences = []
    starts = []
    for prompt, response in pairs:
        if len(prompt) == 0:
            raise ContractError("Prompt must hold at least the BOS token")
        seq = list(prompt) + _with_eos(response)
        if len(seq) > model.max_seq_len:
            raise SequenceLengthError(
                f"Prompt plus response is {len(seq)} tokens; the context holds {model.max_seq_len}"
            )
        sequences.append(seq)
        starts.append(len(prompt))

    width = max(len(seq) for seq in sequences) - 1
    inputs = np.full((len(sequences), width), PAD, dtype=np.int64)
    targets = np.full((len(sequences), width), PAD, dtype=np.int64)
    pad_mask = np.zeros((len(sequences), width), dtype=bool)
    scored = np.zeros((len(sequences), width), dtype=bool)
    for row, (seq, start) in enumerate(zip(sequences, starts)):
        n = len(seq) - 1
        inputs[row, :n] = seq[:-1]
        targets[row, :n] = seq[1:]
        pad_mask[row, :n] = True
        scored[row, start - 1:n] = True

    logits = model.forward_causal_lm(inputs, pad_mask)
    return cross_entropy(logits, targets, scored), int(scored.sum())


class GenerationDetector:
    def __init__(self, model, template: Optional[PromptTemplate] = None,
                 budget: Optional[GenerationBudget] = None):
        """
        Wrap a generation-mode model as a text detector.

        Args:
            model: Model with an LM head
            template: Prompt sections, defaults to the bundled template
            budget: Decoding budget, defaults to 16 new tokens
        """
        self.model = model
        self.template = template or PromptTemplate.from_file()
        self.budget = budget or GenerationBudget()

    def prompt(self, text: str) -> List[int]:
        return build_prompt(self.template, text, self.model.max_seq_len, self.budget)

    def training_pair(self, text: str, label: Label) -> Tuple[List[int], List[int]]:
        return build_prompt(self.template, text, self.model.max_seq_len), response_ids(label)

    def detect(self, text: str) -> Verdict:
        generated = generate(self.model, self.prompt(text), self.budget)
        verdict = parse_label(decode(generated))
        if verdict is Verdict.UNPARSEABLE:
            logger.debug(f"Unparseable generation: {decode(generated)!r}")
        return verdict

    def detect_all(self, texts: Sequence[str]) -> List[Verdict]:
        return [self.detect(text) for text in texts]


__all__ = [
    "GenerationDetector",
    "PromptTemplate",
    "build_prompt",
    "generate",
    "genmode_batch_loss",
    "genmode_loss",
    "parse_label",
    "response_ids",
]
