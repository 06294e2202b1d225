"""
Finite-difference verification of every adjoint rule, op by op and through both model heads.

Runs in float64 with central differences. The relative error of a tensor is
max over elements of |autodiff - numeric| / max(|autodiff| + |numeric|, 1e-4),
so a single wrong element fails the check however large its neighbours are.
"""

import logging
from typing import Callable, Dict, List

import numpy as np
from pydantic import BaseModel

from ..config import LoraConfig, ModelConfig
from ..core import numerics as nx
from ..core.lora import attach_lora
from ..core.model import TransformerLM
from ..core.numerics import Tensor, backward, get_tape, no_grad, precision
from ..exceptions import NumericError
from ..schema.schemas import Mode
from .clsmode import build_cls_input, cls_batch_loss
from .genmode import genmode_batch_loss

logger = logging.getLogger(__name__)

STEP = 1e-4
TOLERANCE = 1e-3
FLOOR = 1e-4

GRADCHECK_MODEL = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, max_seq_len=8, dropout=0.0)


class GradcheckResult(BaseModel):
    check: str
    parameter: str
    relative_error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def numeric_grad(loss_fn: Callable[[], Tensor], tensor: Tensor, h: float = STEP) -> np.ndarray:
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn().item()
            flat[i] = original - h
            minus = loss_fn().item()
            flat[i] = original
            out[i] = (plus - minus) / (2 * h)
    return grad


def check_tensors(name: str, loss_fn: Callable[[], Tensor], tensors: Dict[str, Tensor],
                  tolerance: float = TOLERANCE) -> List[GradcheckResult]:
    """Compare autodiff and central-difference gradients for each named tensor."""
    tape = get_tape()
    tape.reset()
    for t in tensors.values():
        t.grad = None
    backward(loss_fn())
    tape.reset()

    results = []
    for param_name, tensor in tensors.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        error = relative_error(analytic, numeric_grad(loss_fn, tensor))
        results.append(GradcheckResult(check=name, parameter=param_name, relative_error=error,
                                       passed=bool(error <= tolerance)))
    return results


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return nx.tensor_sum(nx.mul(out, Tensor(weights)))


def op_checks(rng: np.random.Generator, tolerance: float = TOLERANCE) -> List[GradcheckResult]:
    """One small check per differentiable primitive."""
    results: List[GradcheckResult] = []

    def run(name, build: Callable[[Dict[str, Tensor]], Tensor], **tensors):
        results.extend(check_tensors(name, lambda: build(tensors), tensors, tolerance))

    w23 = rng.normal(size=(2, 3))
    run("add", lambda t: _weighted(nx.add(t["a"], t["b"]), w23), a=_leaf(rng, 2, 3), b=_leaf(rng, 3))
    run("sub", lambda t: _weighted(nx.sub(t["a"], t["b"]), w23), a=_leaf(rng, 2, 3), b=_leaf(rng, 2, 3))
    run("mul", lambda t: _weighted(nx.mul(t["a"], t["b"]), w23), a=_leaf(rng, 2, 3), b=_leaf(rng, 2, 1))
    run("scale", lambda t: _weighted(nx.scale(t["a"], 0.7), w23), a=_leaf(rng, 2, 3))

    w235 = rng.normal(size=(2, 3, 5))
    run("matmul", lambda t: _weighted(nx.matmul(t["a"], t["b"]), w235), a=_leaf(rng, 2, 3, 4), b=_leaf(rng, 4, 5))
    run("transpose", lambda t: _weighted(nx.transpose(t["a"], (1, 0)), w23), a=_leaf(rng, 3, 2))
    run("reshape", lambda t: _weighted(nx.reshape(t["a"], (2, 3)), w23), a=_leaf(rng, 6))
    w2 = rng.normal(size=(2,))
    run("sum", lambda t: _weighted(nx.tensor_sum(t["a"], axis=1), w2), a=_leaf(rng, 2, 3))
    run("mean", lambda t: _weighted(nx.mean(t["a"], axis=1), w2), a=_leaf(rng, 2, 3))

    w35 = rng.normal(size=(3, 5))
    run("softmax", lambda t: _weighted(nx.softmax(t["x"]), w35), x=_leaf(rng, 3, 5))
    run("log_softmax", lambda t: _weighted(nx.log_softmax(t["x"]), w35), x=_leaf(rng, 3, 5))
    targets = rng.integers(0, 6, size=4)
    mask = np.array([True, False, True, True])
    run("cross_entropy", lambda t: nx.cross_entropy(t["logits"], targets, mask), logits=_leaf(rng, 4, 6))

    w36 = rng.normal(size=(3, 6))
    run("layer_norm", lambda t: _weighted(nx.layer_norm(t["x"], t["gain"], t["bias"]), w36),
        x=_leaf(rng, 3, 6), gain=_leaf(rng, 6), bias=_leaf(rng, 6))
    run("gelu", lambda t: _weighted(nx.gelu(t["x"]), w36), x=_leaf(rng, 3, 6))

    ids = np.array([[1, 4, 4], [0, 6, 2]])
    w234 = rng.normal(size=(2, 3, 4))
    run("embedding", lambda t: _weighted(nx.embedding(t["weight"], ids), w234), weight=_leaf(rng, 7, 4))
    index = np.array([2, 0])
    w24 = rng.normal(size=(2, 4))
    run("select", lambda t: _weighted(nx.select_positions(t["x"], index), w24), x=_leaf(rng, 2, 3, 4))
    blocked = rng.random((2, 3)) < 0.5
    run("masked_fill", lambda t: _weighted(nx.masked_fill(t["x"], blocked, 0.0), w23), x=_leaf(rng, 2, 3))
    run("dropout", lambda t: _weighted(nx.dropout(t["x"], 0.3, np.random.default_rng(7), True), w36),
        x=_leaf(rng, 3, 6))
    return results


def model_checks(rng: np.random.Generator, tolerance: float = TOLERANCE) -> List[GradcheckResult]:
    """Every parameter of a tiny generation model, then the adapters and head of a classification model."""
    results: List[GradcheckResult] = []
    cfg = GRADCHECK_MODEL

    gen = TransformerLM(cfg, seed=int(rng.integers(1 << 31))).eval()
    pairs = [
        (list(rng.integers(0, 256, size=4)), [int(rng.integers(0, 256))]),
        (list(rng.integers(0, 256, size=2)), [int(rng.integers(0, 256))]),
    ]
    results.extend(check_tensors("model:generation", lambda: genmode_batch_loss(gen, pairs)[0],
                                 dict(gen.named_parameters()), tolerance))

    cls = TransformerLM(cfg, seed=int(rng.integers(1 << 31)), mode=Mode.CLASSIFICATION)
    attach_lora(cls, LoraConfig(r=2, lora_dropout=0.0, targets=["q", "k", "v", "o", "fc", "proj"],
                                seed=int(rng.integers(1 << 31))))
    for adapter in cls.adapters.values():
        adapter.B.data = rng.normal(0.0, 0.5, size=adapter.B.shape)
    cls.eval()
    inputs = [build_cls_input("", "abcde", cfg.max_seq_len), build_cls_input("", "xy", cfg.max_seq_len)]
    labels = [1, 0]
    results.extend(check_tensors("model:classification", lambda: cls_batch_loss(cls, inputs, labels),
                                 cls.trainable_parameters(), tolerance))
    return results


def run_gradcheck(seed: int = 0, tolerance: float = TOLERANCE, include_model: bool = True) -> List[GradcheckResult]:
    """
    Run the whole suite in float64.

    Returns:
        One result per checked tensor
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        results = op_checks(rng, tolerance)
        if include_model:
            results.extend(model_checks(rng, tolerance))
    failed = [r for r in results if not r.passed]
    logger.info(f"Gradient check: {len(results) - len(failed)}/{len(results)} tensors passed")
    for r in failed:
        logger.error(f"Gradient check failed: {r.check} / {r.parameter} relative error {r.relative_error:.3e}")
    return results


def assert_gradcheck(results: List[GradcheckResult]):
    failed = [r for r in results if not r.passed]
    if failed:
        detail = "; ".join(f"{r.check} {r.parameter} ({r.relative_error:.2e})" for r in failed)
        raise NumericError(f"Gradient check failed for {len(failed)} tensors: {detail}")
