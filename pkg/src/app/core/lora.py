"""
Low-rank adaptation of frozen weight matrices.

A base weight W0 (math layout d x k) is kept frozen and a trainable delta
(alpha / r) * B A is added beside it, with A of shape r x k and B of shape d x r.
Weights are stored transposed (k x d) because activations are row vectors:
``y = x @ W0^T``. B starts at zero, so a fresh adapter leaves the model unchanged.
"""

import copy
import logging
from typing import TYPE_CHECKING, Dict, Optional

import numpy as np

from ..config import LoraConfig, ModelConfig
from ..exceptions import ConfigurationError, ContractError
from .numerics import Tensor, dropout, matmul

if TYPE_CHECKING:
    from .model import TransformerLM

logger = logging.getLogger(__name__)


class LoraAdapter:
    def __init__(self, base: Tensor, A: Tensor, B: Tensor, config: LoraConfig, target: str = ""):
        self.base = base
        self.A = A
        self.B = B
        self.config = config
        self.target = target

    @property
    def r(self) -> int:
        return self.config.r

    @property
    def scale(self) -> float:
        return self.config.scale

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def param_count(self) -> int:
        return self.d * self.r + self.r * self.k

    def delta(self) -> np.ndarray:
        """Scaled low-rank update in math layout (d x k)."""
        return self.scale * (self.B.data @ self.A.data)

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Frozen path plus the adapter branch; dropout only touches the branch input."""
        frozen = matmul(x, self.base)
        branch = dropout(x, self.config.lora_dropout, rng, training)
        low_rank = matmul(matmul(branch, self.A.transpose(1, 0)), self.B.transpose(1, 0))
        return frozen + low_rank * self.scale


def check_rank(r: int, d: int, k: int):
    if r > min(d, k) / 2:
        raise ConfigurationError(
            f"LoRA rank r={r} is too large for a {d}x{k} matrix; need r <= {min(d, k) // 2}"
        )


def attach(base: Tensor, cfg: LoraConfig, seed=None, target: str = "") -> LoraAdapter:
    """
    Attach an adapter to a frozen base matrix.

    Args:
        base: Weight stored as (k_in, d_out)
        cfg: LoRA configuration
        seed: Seed or numpy Generator for the A initialization
        target: Name of the adapted matrix, for diagnostics

    Returns:
        LoraAdapter with A ~ N(0, 1/r) and B = 0
    """
    if base.ndim != 2:
        raise ContractError(f"LoRA targets 2-D matrices, got shape {base.shape}")
    k, d = base.shape
    check_rank(cfg.r, d, k)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    base.requires_grad = False
    base.grad = None
    A = Tensor(rng.normal(0.0, np.sqrt(1.0 / cfg.r), size=(cfg.r, k)), requires_grad=True, name=f"{target}.lora_A")
    B = Tensor(np.zeros((d, cfg.r)), requires_grad=True, name=f"{target}.lora_B")
    return LoraAdapter(base, A, B, cfg, target)


def merge(adapter: LoraAdapter) -> Tensor:
    """Return W0 + (alpha / r) B A in storage layout; W0 itself is left untouched."""
    merged = adapter.base.data + adapter.delta().T.astype(adapter.base.data.dtype)
    return Tensor(merged, requires_grad=False, name=adapter.target)


def target_names(model_config: ModelConfig, cfg: LoraConfig):
    names = []
    for layer in range(model_config.n_layers):
        for target in cfg.targets:
            if target in ("fc", "proj"):
                names.append(f"layers.{layer}.ff.{target}.weight")
            else:
                names.append(f"layers.{layer}.attn.{target}.weight")
    return names


def attach_lora(model: "TransformerLM", cfg: LoraConfig) -> Dict[str, LoraAdapter]:
    """
    Freeze every base parameter and attach adapters to the targeted matrices.

    The classifier head, when present, stays trainable.
    """
    if model.adapters:
        raise ContractError("Model already carries LoRA adapters")
    if model.merged:
        raise ContractError("Cannot attach adapters to a merged model")

    for name, param in model.params.items():
        if not name.startswith("cls_head."):
            param.requires_grad = False
            param.grad = None

    rng = np.random.default_rng(cfg.seed)
    for name in target_names(model.config, cfg):
        model.adapters[name] = attach(model.params[name], cfg, rng, target=name)
    model.lora_config = cfg
    logger.info(f"Attached {len(model.adapters)} LoRA adapters (r={cfg.r}, alpha={cfg.lora_alpha})")
    return model.adapters


def merge_lora(model: "TransformerLM") -> "TransformerLM":
    """Return a copy of the model with every adapter folded into its base weight."""
    merged = copy.deepcopy(model)
    for name, adapter in merged.adapters.items():
        merged.params[name] = merge(adapter)
    merged.adapters = {}
    merged.merged = True
    return merged


def target_shapes(model_config: ModelConfig) -> Dict[str, tuple]:
    """(d, k) of every adaptable matrix in math layout."""
    d_model, d_ff = model_config.d_model, model_config.d_ff
    return {"q": (d_model, d_model), "k": (d_model, d_model), "v": (d_model, d_model),
            "o": (d_model, d_model), "fc": (d_ff, d_model), "proj": (d_model, d_ff)}


def validate_rank(model_config: ModelConfig, cfg: LoraConfig):
    """Raise ConfigurationError before any work if r does not fit a targeted matrix."""
    shapes = target_shapes(model_config)
    for target in cfg.targets:
        check_rank(cfg.r, *shapes[target])


def lora_param_count(model_config: ModelConfig, cfg: LoraConfig) -> int:
    """Sum of d*r + r*k over the targeted matrices of a model shape."""
    shapes = target_shapes(model_config)
    per_layer = sum(d * cfg.r + cfg.r * k for d, k in (shapes[t] for t in cfg.targets))
    return model_config.n_layers * per_layer


def trainable_param_count(model: "TransformerLM", cfg: Optional[LoraConfig] = None, include_head: bool = True) -> int:
    """
    Count trainable parameters under LoRA.

    With adapters attached the count comes from the adapters themselves;
    otherwise it is computed from ``cfg`` and the model shape. The classifier
    head is added in classification mode.
    """
    if model.adapters:
        total = sum(adapter.param_count for adapter in model.adapters.values())
    elif cfg is not None:
        total = lora_param_count(model.config, cfg)
    else:
        raise ContractError("No adapters attached and no LoRA config given")
    if include_head and model.has_classifier_head:
        total += sum(p.size for n, p in model.params.items() if n.startswith("cls_head."))
    return total
