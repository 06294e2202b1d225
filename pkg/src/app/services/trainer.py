"""
AdamW fine-tuning for both detection modes, base-model pretraining and the mode timing benchmark.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..config import PretrainConfig, RunConfig, TrainConfig
from ..core.lora import attach_lora, trainable_param_count
from ..core.model import TransformerLM
from ..core.numerics import Tensor, backward, cross_entropy, get_tape
from ..core.tokenizer import BOS
from ..exceptions import ContractError, DataError, ModeMismatchError, NumericError
from ..schema.schemas import (
    BenchmarkReport,
    EvaluationResult,
    LabeledExample,
    Mode,
    TrainRunStats,
    Verdict,
)
from .clsmode import ClassificationDetector, build_cls_input, cls_batch_loss
from .genmode import GenerationDetector, PromptTemplate, build_prompt, genmode_batch_loss, response_ids
from .metrics import accuracy, confusion, f1, reduction

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamWState,
               cfg: TrainConfig) -> AdamWState:
    """
    One AdamW update with bias correction and decoupled weight decay, in place.

    theta <- theta - lr * wd * theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            bad = int(np.sum(~np.isfinite(grad)))
            raise NumericError(f"Non-finite gradient for {name}: {bad} of {grad.size} entries")
        if params[name].shape != grad.shape:
            raise ContractError(f"Gradient shape {grad.shape} does not match {name} {params[name].shape}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - cfg.beta1 ** t
    correction2 = 1.0 - cfg.beta2 ** t
    for name, grad in grads.items():
        theta = params[name]
        g = grad.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        new = theta.astype(np.float64) * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * update
        theta[...] = new.astype(theta.dtype)
    return state


class AdamW:
    def __init__(self, params: Dict[str, Tensor], cfg: TrainConfig):
        """
        Optimizer over named trainable tensors.

        Args:
            params: Name -> tensor; only these are ever updated
            cfg: Learning rate, betas, eps and weight decay
        """
        self.params = params
        self.cfg = cfg
        self.state = AdamWState()
        logger.debug(f"AdamW over {len(params)} tensors, lr={cfg.lr}, weight_decay={cfg.weight_decay}")

    def step(self):
        live = {name: p for name, p in self.params.items() if p.grad is not None}
        adamw_step({n: p.data for n, p in live.items()}, {n: p.grad for n, p in live.items()},
                   self.state, self.cfg)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def grad_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(tensors: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global norm is at most max_norm; returns the pre-clip norm."""
    tensors = list(tensors)
    norm = grad_norm(tensors)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for t in tensors:
            if t.grad is not None:
                t.grad = (t.grad * factor).astype(t.grad.dtype)
    return norm


@dataclass
class TrainResult:
    model: TransformerLM
    stats: TrainRunStats


class _Batches:
    """Pre-encoded training inputs for one mode."""

    def __init__(self, model: TransformerLM, examples: Sequence[LabeledExample], config: RunConfig,
                 template: Optional[PromptTemplate]):
        self.model = model
        self.mode = config.train.mode
        if self.mode is Mode.GENERATION:
            template = template or PromptTemplate.from_settings(config.generation)
            self.items = [(build_prompt(template, ex.text, model.max_seq_len), response_ids(ex.label))
                          for ex in examples]
        else:
            instruction = config.classification.instruction
            self.items = [build_cls_input(instruction, ex.text, model.max_seq_len) for ex in examples]
        self.labels = [ex.label for ex in examples]

    def loss(self, index: Sequence[int]) -> Tuple[Tensor, int]:
        if self.mode is Mode.GENERATION:
            return genmode_batch_loss(self.model, [self.items[i] for i in index])
        loss = cls_batch_loss(self.model, [self.items[i] for i in index], [self.labels[i] for i in index])
        return loss, len(index)


def check_mode(model: TransformerLM, mode: Mode):
    if mode is Mode.GENERATION and "lm_head.weight" not in model.params:
        raise ModeMismatchError("Generation mode needs a model with an LM head")
    if mode is Mode.CLASSIFICATION and not model.has_classifier_head:
        raise ModeMismatchError("Classification mode needs a model with a classifier head")


def build_detector_model(base: TransformerLM, mode: Mode, config: RunConfig) -> TransformerLM:
    """Copy a pretrained base, swap in the mode's head and attach fresh LoRA adapters."""
    if base.adapters or base.has_classifier_head:
        raise ContractError("Base model must be a plain language model")
    model = base.copy()
    model.forward_passes = 0
    if mode is Mode.CLASSIFICATION:
        model.to_classification(config.train.seed)
    attach_lora(model, config.lora.model_copy(update={"seed": config.train.seed}))
    return model.eval()


def train(model: TransformerLM, train_set: Sequence[LabeledExample],
          val_set: Optional[Sequence[LabeledExample]], config: RunConfig,
          template: Optional[PromptTemplate] = None) -> TrainResult:
    """
    Fine-tune the adapters (and the classifier head) of ``model``.

    Args:
        model: Model with LoRA attached and the head for ``config.train.mode``
        train_set: Training examples
        val_set: Validation examples used for best-epoch selection; may be empty
        config: Run configuration
        template: Generation prompt template override

    Returns:
        TrainResult holding the model restored to its best epoch and the run statistics
    """
    cfg = config.train
    mode = cfg.mode
    if not train_set:
        raise DataError("Training set is empty")
    check_mode(model, mode)
    if not model.adapters:
        raise ContractError("Attach LoRA adapters before training")

    batches = _Batches(model, train_set, config, template)
    params = model.trainable_parameters()
    optimizer = AdamW(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    model.rng = np.random.default_rng([cfg.seed, 1])
    tape = get_tape()

    stats = TrainRunStats(mode=mode, seed=cfg.seed, trainable_params=trainable_param_count(model))
    best_accuracy = -1.0
    best_state = None
    n = len(train_set)
    logger.info(f"Training {mode.value} mode on {n} examples for {cfg.epochs} epochs "
                f"({stats.trainable_params} trainable parameters)")

    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        passes_before = model.forward_passes
        epoch_scored = 0
        losses = []
        start = time.perf_counter()
        for offset in range(0, n, cfg.batch_size):
            index = order[offset:offset + cfg.batch_size]
            tape.reset()
            loss, scored = batches.loss(index)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"Loss became {value} at epoch {epoch + 1}, batch {offset // cfg.batch_size}")
            backward(loss)
            clip_grad_norm(params.values(), cfg.grad_clip)
            optimizer.step()
            optimizer.zero_grad()
            tape.reset()
            losses.append(value)
            epoch_scored += scored
            logger.debug(f"epoch {epoch + 1} batch {offset // cfg.batch_size} loss {value:.4f}")
        elapsed = time.perf_counter() - start
        model.eval()

        stats.scored_positions += epoch_scored
        stats.forward_passes += model.forward_passes - passes_before
        stats.epoch_losses.append(float(np.mean(losses)))
        stats.epoch_seconds.append(max(elapsed, 1e-9))

        if val_set:
            result = evaluate(model, val_set, mode, config, template)
            score = result.accuracy
            stats.val_accuracies.append(score)
            message = f", val acc {score:.4f}"
        else:
            score = float(epoch)
            message = ""
        if score > best_accuracy:
            best_accuracy = score
            stats.best_epoch = epoch + 1
            best_state = model.state_dict()
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss {stats.epoch_losses[-1]:.4f}, "
                    f"{elapsed:.2f}s{message}")

    model.load_state_dict(best_state)
    return TrainResult(model=model.eval(), stats=stats)


def evaluate(model: TransformerLM, examples: Sequence[LabeledExample], mode: Optional[Mode] = None,
             config: Optional[RunConfig] = None,
             template: Optional[PromptTemplate] = None) -> EvaluationResult:
    """Run the detector for ``mode`` over labeled examples and score it."""
    if not examples:
        raise DataError("Nothing to evaluate")
    mode = mode or model.mode
    if mode is not model.mode:
        raise ModeMismatchError(f"Model is in {model.mode.value} mode, asked to evaluate {mode.value}")
    check_mode(model, mode)
    config = config or RunConfig()
    model.eval()
    passes_before = model.forward_passes
    texts = [ex.text for ex in examples]

    if mode is Mode.GENERATION:
        template = template or PromptTemplate.from_settings(config.generation)
        predictions = GenerationDetector(model, template, config.generation.budget).detect_all(texts)
    else:
        detector = ClassificationDetector(model, config.classification.instruction, config.train.batch_size)
        predictions = [Verdict(label.value) for label in detector.detect_all(texts)]

    counts = confusion(predictions, [ex.label for ex in examples])
    unparseable = sum(1 for p in predictions if p is Verdict.UNPARSEABLE)
    if unparseable:
        logger.warning(f"{unparseable} of {len(examples)} generations had no verdict")
    return EvaluationResult(
        mode=mode,
        confusion=counts,
        accuracy=accuracy(counts),
        f1=f1(counts),
        parse_rate=1.0 - unparseable / len(examples),
        forward_passes=model.forward_passes - passes_before,
        predictions=predictions,
    )


def pretrain_base(model: TransformerLM, text: str, cfg: PretrainConfig) -> List[float]:
    """
    Full-parameter causal LM training on random windows of ``text``.

    Each window is BOS followed by ``cfg.window`` bytes.

    Returns:
        Loss per step
    """
    check_mode(model, Mode.GENERATION)
    if model.adapters:
        raise ContractError("Pretraining updates every weight; detach adapters first")
    data = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    window = min(cfg.window, model.max_seq_len)
    if len(data) < window + 1:
        raise DataError(f"Pretraining text has {len(data)} bytes, need more than {window}")

    params = model.trainable_parameters()
    optimizer = AdamW(params, TrainConfig(lr=cfg.lr, weight_decay=0.0))
    rng = np.random.default_rng(cfg.seed)
    model.rng = np.random.default_rng([cfg.seed, 2])
    tape = get_tape()
    losses: List[float] = []
    model.train()
    for step in range(cfg.steps):
        starts = rng.integers(0, len(data) - window + 1, size=cfg.batch_size)
        batch = np.stack([np.concatenate(([BOS], data[s:s + window])) for s in starts])
        tape.reset()
        logits = model.forward_causal_lm(batch[:, :-1])
        loss = cross_entropy(logits, batch[:, 1:])
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"Pretraining loss became {value} at step {step}")
        backward(loss)
        clip_grad_norm(params.values(), 1.0)
        optimizer.step()
        optimizer.zero_grad()
        losses.append(value)
        if (step + 1) % 50 == 0:
            logger.info(f"Pretrain step {step + 1}/{cfg.steps}: loss {value:.4f}")
    tape.reset()
    model.eval()
    model.forward_passes = 0
    return losses


def benchmark_modes(base: TransformerLM, train_set: Sequence[LabeledExample], config: RunConfig,
                    template: Optional[PromptTemplate] = None) -> Tuple[BenchmarkReport, TrainRunStats, TrainRunStats]:
    """
    Train both modes from the same base on the same data and compare training time.

    Returns:
        The timing report plus the generation and classification run stats
    """
    runs = {}
    for mode in (Mode.GENERATION, Mode.CLASSIFICATION):
        mode_config = config.with_mode(mode)
        model = build_detector_model(base, mode, mode_config)
        runs[mode] = train(model, train_set, None, mode_config, template).stats
        logger.info(f"{mode.value} mode trained in {runs[mode].total_seconds:.2f}s")

    gen, cls = runs[Mode.GENERATION], runs[Mode.CLASSIFICATION]
    report = BenchmarkReport(
        generation_seconds=gen.total_seconds,
        classification_seconds=cls.total_seconds,
        reduction=reduction(gen.total_seconds, cls.total_seconds),
        epochs=config.train.epochs,
        examples=len(train_set),
        generation_forward_passes=gen.forward_passes,
        classification_forward_passes=cls.forward_passes,
        generation_scored_positions=gen.scored_positions,
    )
    return report, gen, cls
