"""
Tiny decoder-only transformer with a causal LM head and a sequence classification head.

Pre-norm blocks, learned absolute positions, GELU feed-forward. Linear weights
are stored (in, out) and applied as ``x @ W + b``.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..config import LoraConfig, ModelConfig
from ..exceptions import ContractError, SequenceLengthError, VocabularyError
from ..schema.schemas import Mode
from .lora import LoraAdapter
from .numerics import (
    Tensor,
    dropout,
    embedding,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    ones,
    randn,
    select_positions,
    softmax,
    zeros,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02
HEAD_INIT_STD = 0.02


@dataclass
class HiddenStates:
    """Layer outputs E^0..E^L plus the final-normalized top layer."""

    layers: List[Tensor] = field(default_factory=list)
    top: Optional[Tensor] = None


def last_token_index(pad_mask: np.ndarray) -> np.ndarray:
    """Index of the last real token per row, assuming right padding."""
    mask = np.asarray(pad_mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ContractError("pad_mask must mark at least one real token per sequence")
    return counts - 1


def pool_last_token(hidden: Tensor, pad_mask: np.ndarray) -> Tensor:
    """
    Pool the hidden state at the last non-pad position.

    Args:
        hidden: Top-layer states, [seq_len, d_model] or [batch, seq_len, d_model]
        pad_mask: Booleans marking real tokens, same leading shape as hidden

    Returns:
        [d_model] or [batch, d_model]
    """
    mask = np.asarray(pad_mask, dtype=bool)
    if hidden.ndim == 2:
        pooled = select_positions(hidden.reshape(1, *hidden.shape), last_token_index(mask[None, :]))
        return pooled.reshape(hidden.shape[-1])
    return select_positions(hidden, last_token_index(mask))


class TransformerLM:
    def __init__(self, config: ModelConfig, seed: int = 0, mode: Mode = Mode.GENERATION):
        """
        Build a randomly initialized model.

        Args:
            config: Model shape
            seed: Seed for initialization and for dropout masks
            mode: GENERATION builds the LM head, CLASSIFICATION the 2-way head
        """
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        self.adapters: Dict[str, LoraAdapter] = {}
        self.lora_config: Optional[LoraConfig] = None
        self.mode = Mode.GENERATION
        self.merged = False
        self.training = False
        self.forward_passes = 0
        self._init_params()
        if mode is Mode.CLASSIFICATION:
            self.to_classification(seed)

    def _init_params(self):
        c = self.config
        rng = self.rng
        self._add("wte", randn((c.vocab_size, c.d_model), INIT_STD, rng))
        self._add("wpe", randn((c.max_seq_len, c.d_model), INIT_STD, rng))
        for i in range(c.n_layers):
            p = f"layers.{i}"
            self._add(f"{p}.ln1.gain", ones((c.d_model,)))
            self._add(f"{p}.ln1.bias", zeros((c.d_model,)))
            for name in ("q", "k", "v", "o"):
                self._add(f"{p}.attn.{name}.weight", randn((c.d_model, c.d_model), INIT_STD, rng))
                self._add(f"{p}.attn.{name}.bias", zeros((c.d_model,)))
            self._add(f"{p}.ln2.gain", ones((c.d_model,)))
            self._add(f"{p}.ln2.bias", zeros((c.d_model,)))
            self._add(f"{p}.ff.fc.weight", randn((c.d_model, c.d_ff), INIT_STD, rng))
            self._add(f"{p}.ff.fc.bias", zeros((c.d_ff,)))
            self._add(f"{p}.ff.proj.weight", randn((c.d_ff, c.d_model), INIT_STD, rng))
            self._add(f"{p}.ff.proj.bias", zeros((c.d_model,)))
        self._add("ln_f.gain", ones((c.d_model,)))
        self._add("ln_f.bias", zeros((c.d_model,)))
        self._add("lm_head.weight", randn((c.d_model, c.vocab_size), INIT_STD, rng))
        self._add("lm_head.bias", zeros((c.vocab_size,)))

    def _add(self, name: str, tensor: Tensor):
        tensor.name = name
        self.params[name] = tensor

    def to_classification(self, seed: Optional[int] = None):
        """Swap the LM head for a randomly initialized 2-way linear head."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        self.params.pop("lm_head.weight", None)
        self.params.pop("lm_head.bias", None)
        self._add("cls_head.weight", randn((self.config.d_model, 2), HEAD_INIT_STD, rng))
        self._add("cls_head.bias", zeros((2,)))
        self.mode = Mode.CLASSIFICATION
        return self

    @property
    def has_classifier_head(self) -> bool:
        return "cls_head.weight" in self.params

    @property
    def max_seq_len(self) -> int:
        return self.config.max_seq_len

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.params.items()
        for name, adapter in self.adapters.items():
            yield f"{name}.lora_A", adapter.A
            yield f"{name}.lora_B", adapter.B

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters() if p.requires_grad}

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if strict and (missing or unexpected):
            raise ContractError(f"State mismatch; missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in params:
                if params[name].shape != value.shape:
                    raise ContractError(f"Shape mismatch for {name}: {params[name].shape} vs {value.shape}")
                params[name].data = np.array(value, copy=True)

    def copy(self) -> "TransformerLM":
        return copy.deepcopy(self)

    # Forward passes

    def _prepare(self, tokens, pad_mask) -> Tuple[np.ndarray, np.ndarray, bool]:
        ids = np.asarray(tokens, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ContractError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
        seq_len = ids.shape[1]
        if seq_len < 1 or seq_len > self.config.max_seq_len:
            raise SequenceLengthError(
                f"Sequence length {seq_len} is outside [1, {self.config.max_seq_len}]"
            )
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise VocabularyError(f"Token ids must be in [0, {self.config.vocab_size})")
        if pad_mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        else:
            mask = np.asarray(pad_mask, dtype=bool)
            if single and mask.ndim == 1:
                mask = mask[None, :]
            if mask.shape != ids.shape:
                raise ContractError(f"pad_mask shape {mask.shape} does not match tokens {ids.shape}")
        return ids, mask, single

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        weight_name = f"{prefix}.weight"
        adapter = self.adapters.get(weight_name)
        if adapter is not None:
            out = adapter.forward(x, self.training, self.rng)
        else:
            out = matmul(x, self.params[weight_name])
        return out + self.params[f"{prefix}.bias"]

    def _attention(self, x: Tensor, layer: int, blocked: np.ndarray) -> Tensor:
        batch, seq_len, d_model = x.shape
        n_heads = self.config.n_heads
        head_dim = d_model // n_heads
        prefix = f"layers.{layer}.attn"

        def split_heads(t: Tensor) -> Tensor:
            return t.reshape(batch, seq_len, n_heads, head_dim).transpose(0, 2, 1, 3)

        q = split_heads(self._linear(x, f"{prefix}.q"))
        k = split_heads(self._linear(x, f"{prefix}.k"))
        v = split_heads(self._linear(x, f"{prefix}.v"))
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(head_dim))
        weights = softmax(masked_fill(scores, blocked), axis=-1)
        context = matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, seq_len, d_model)
        return self._linear(context, f"{prefix}.o")

    def _block(self, x: Tensor, layer: int, blocked: np.ndarray) -> Tensor:
        p = f"layers.{layer}"
        p_drop = self.config.dropout
        h = layer_norm(x, self.params[f"{p}.ln1.gain"], self.params[f"{p}.ln1.bias"])
        x = x + dropout(self._attention(h, layer, blocked), p_drop, self.rng, self.training)
        h = layer_norm(x, self.params[f"{p}.ln2.gain"], self.params[f"{p}.ln2.bias"])
        h = self._linear(gelu(self._linear(h, f"{p}.ff.fc")), f"{p}.ff.proj")
        return x + dropout(h, p_drop, self.rng, self.training)

    def forward_hidden(self, ids: np.ndarray, mask: np.ndarray) -> HiddenStates:
        """Run the decoder stack on a [batch, seq_len] id array."""
        batch, seq_len = ids.shape
        causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
        allowed = causal[None, None, :, :] & mask[:, None, None, :]
        blocked = ~allowed

        x = embedding(self.params["wte"], ids) + embedding(self.params["wpe"], np.arange(seq_len))
        x = dropout(x, self.config.dropout, self.rng, self.training)
        states = HiddenStates(layers=[x])
        for layer in range(self.config.n_layers):
            x = self._block(x, layer, blocked)
            states.layers.append(x)
        states.top = layer_norm(x, self.params["ln_f.gain"], self.params["ln_f.bias"])
        self.forward_passes += batch
        return states

    def forward_causal_lm(self, tokens, pad_mask=None) -> Tensor:
        """
        Next-token logits for every position.

        Args:
            tokens: Token ids, [seq_len] or [batch, seq_len]
            pad_mask: Optional booleans marking real tokens

        Returns:
            Logits [seq_len, vocab] or [batch, seq_len, vocab]; row t only sees tokens <= t
        """
        if "lm_head.weight" not in self.params:
            raise ContractError("Model has no LM head; it is in classification mode")
        ids, mask, single = self._prepare(tokens, pad_mask)
        states = self.forward_hidden(ids, mask)
        logits = matmul(states.top, self.params["lm_head.weight"]) + self.params["lm_head.bias"]
        if single:
            return logits.reshape(ids.shape[1], self.config.vocab_size)
        return logits

    def forward_sequence_classification(self, tokens, pad_mask=None) -> Tensor:
        """
        Two-way logits from the last real token's top-layer state.

        Returns:
            [2] for a single sequence or [batch, 2]
        """
        if not self.has_classifier_head:
            raise ContractError("Model has no classifier head; it is in generation mode")
        ids, mask, single = self._prepare(tokens, pad_mask)
        last_token_index(mask)
        states = self.forward_hidden(ids, mask)
        pooled = pool_last_token(states.top, mask)
        logits = matmul(pooled, self.params["cls_head.weight"]) + self.params["cls_head.bias"]
        if single:
            return logits.reshape(2)
        return logits
