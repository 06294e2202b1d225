import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.app.config import GenerationSettings, PretrainConfig, RunConfig, TrainConfig
from src.app.core.lora import attach_lora
from src.app.core.model import TransformerLM
from src.app.core.numerics import Tensor
from src.app.exceptions import ContractError, DataError, ModeMismatchError, NumericError
from src.app.schema.schemas import Mode
from src.app.services.stegsynth import load_seed_corpus
from src.app.services.trainer import (
    AdamW,
    AdamWState,
    adamw_step,
    benchmark_modes,
    build_detector_model,
    clip_grad_norm,
    evaluate,
    pretrain_base,
    train,
)

SHORT_PROMPT = GenerationSettings(template="concise.txt", description="d", instruction="i")


def _config(lora_config, mode=Mode.CLASSIFICATION, **train):
    settings = {"lr": 1e-2, "weight_decay": 0.0, "batch_size": 10, "epochs": 1, "mode": mode, **train}
    return RunConfig(lora=lora_config, train=TrainConfig(**settings), generation=SHORT_PROMPT)


def _adapted(tiny_config, lora_config, mode):
    model = TransformerLM(tiny_config, seed=0, mode=mode)
    attach_lora(model, lora_config)
    return model


class TestAdamW:
    def test_first_step(self):
        theta = np.array([1.0])
        adamw_step({"w": theta}, {"w": np.array([0.5])}, AdamWState(), TrainConfig(lr=0.1, weight_decay=0.0))
        assert theta[0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_gradient_applies_decay_only(self):
        theta = np.array([1.0])
        adamw_step({"w": theta}, {"w": np.array([0.0])}, AdamWState(), TrainConfig(lr=0.1, weight_decay=0.01))
        assert theta[0] == pytest.approx(1.0 - 0.1 * 0.01)

    def test_non_finite_gradient(self):
        theta = np.array([1.0, 2.0])
        with pytest.raises(NumericError, match="w"):
            adamw_step({"w": theta}, {"w": np.array([np.nan, 0.0])}, AdamWState(), TrainConfig())
        assert theta.tolist() == [1.0, 2.0]

    def test_untouched_without_grad(self):
        p = Tensor(np.ones(3), requires_grad=True)
        AdamW({"p": p}, TrainConfig(lr=0.1)).step()
        assert p.data.tolist() == [1.0, 1.0, 1.0]

    def test_clip(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, abs=1e-5)


class TestClassificationTraining:
    def test_overfits_separable_data(self, tiny_config, lora_config, toy_examples):
        model = _adapted(tiny_config, lora_config, Mode.CLASSIFICATION)
        result = train(model, toy_examples, None, _config(lora_config, epochs=100))
        assert result.stats.epoch_losses[-1] < 0.1
        assert evaluate(result.model, toy_examples).accuracy >= 0.9

    def test_one_forward_per_example(self, tiny_config, lora_config, toy_examples):
        model = _adapted(tiny_config, lora_config, Mode.CLASSIFICATION)
        stats = train(model, toy_examples, None, _config(lora_config, epochs=2)).stats
        assert stats.forward_passes == 2 * len(toy_examples)
        assert stats.scored_positions == 2 * len(toy_examples)

    def test_base_weights_stay_frozen(self, tiny_config, lora_config, toy_examples):
        model = _adapted(tiny_config, lora_config, Mode.CLASSIFICATION)
        frozen = {name: p.data.copy() for name, p in model.params.items() if not name.startswith("cls_head.")}
        train(model, toy_examples, None, _config(lora_config, epochs=2))
        for name, value in frozen.items():
            assert np.array_equal(model.params[name].data, value), name

    def test_best_epoch_by_validation(self, tiny_config, lora_config, toy_examples):
        model = _adapted(tiny_config, lora_config, Mode.CLASSIFICATION)
        stats = train(model, toy_examples, toy_examples, _config(lora_config, epochs=3)).stats
        assert len(stats.val_accuracies) == 3
        assert stats.val_accuracies[stats.best_epoch - 1] == max(stats.val_accuracies)


class TestGenerationTraining:
    def test_scored_positions_cover_response_tokens(self, tiny_config, lora_config, toy_examples):
        model = _adapted(tiny_config, lora_config, Mode.GENERATION)
        stats = train(model, toy_examples, None, _config(lora_config, mode=Mode.GENERATION)).stats
        response_tokens = len(toy_examples) * len("stego") + len(toy_examples)
        assert stats.scored_positions == response_tokens
        assert stats.forward_passes == len(toy_examples)

    def test_evaluate_reports_parse_rate(self, tiny_config, lora_config, toy_examples):
        model = _adapted(tiny_config, lora_config, Mode.GENERATION)
        config = _config(lora_config, mode=Mode.GENERATION)
        result = evaluate(model, toy_examples[:4], Mode.GENERATION, config)
        assert 0.0 <= result.parse_rate <= 1.0
        assert len(result.predictions) == 4
        assert result.forward_passes >= 4


class TestContracts:
    def test_mode_mismatch_in_training(self, tiny_config, lora_config, toy_examples):
        model = _adapted(tiny_config, lora_config, Mode.CLASSIFICATION)
        with pytest.raises(ModeMismatchError):
            train(model, toy_examples, None, _config(lora_config, mode=Mode.GENERATION))

    def test_mode_mismatch_in_evaluation(self, tiny_config, lora_config, toy_examples):
        model = _adapted(tiny_config, lora_config, Mode.CLASSIFICATION)
        with pytest.raises(ModeMismatchError):
            evaluate(model, toy_examples, Mode.GENERATION)

    def test_needs_adapters(self, tiny_config, lora_config, toy_examples):
        model = TransformerLM(tiny_config, seed=0, mode=Mode.CLASSIFICATION)
        with pytest.raises(ContractError):
            train(model, toy_examples, None, _config(lora_config))

    def test_empty_training_set(self, tiny_config, lora_config):
        with pytest.raises(DataError):
            train(_adapted(tiny_config, lora_config, Mode.CLASSIFICATION), [], None, _config(lora_config))


class TestDetectorModel:
    def test_build_leaves_base_untouched(self, tiny_config, lora_config):
        base = TransformerLM(tiny_config, seed=0)
        model = build_detector_model(base, Mode.CLASSIFICATION, _config(lora_config))
        assert model.has_classifier_head and model.adapters
        assert not base.adapters and not base.has_classifier_head
        np.testing.assert_array_equal(model.params["wte"].data, base.params["wte"].data)

    def test_base_must_be_plain(self, tiny_config, lora_config):
        base = _adapted(tiny_config, lora_config, Mode.GENERATION)
        with pytest.raises(ContractError):
            build_detector_model(base, Mode.GENERATION, _config(lora_config))


class TestPretrain:
    def test_loss_decreases(self, tiny_config):
        model = TransformerLM(tiny_config, seed=0)
        losses = pretrain_base(model, load_seed_corpus(), PretrainConfig(steps=40, lr=3e-3, window=32, batch_size=4))
        assert len(losses) == 40
        assert np.mean(losses[-5:]) < np.mean(losses[:5])
        assert model.forward_passes == 0

    def test_rejects_adapted_model(self, tiny_config, lora_config):
        with pytest.raises(ContractError):
            pretrain_base(_adapted(tiny_config, lora_config, Mode.GENERATION), load_seed_corpus(), PretrainConfig())

    def test_text_too_short(self, tiny_config):
        with pytest.raises(DataError):
            pretrain_base(TransformerLM(tiny_config, seed=0), "tiny", PretrainConfig(window=32))


class TestBenchmark:
    def test_both_modes_from_one_base(self, tiny_config, lora_config, toy_examples):
        base = TransformerLM(tiny_config, seed=0)
        report, gen, cls = benchmark_modes(base, toy_examples, _config(lora_config))
        assert report.examples == len(toy_examples) and report.epochs == 1
        assert report.classification_forward_passes == len(toy_examples)
        assert report.generation_forward_passes == len(toy_examples)
        assert report.generation_scored_positions == 6 * len(toy_examples)
        assert gen.mode is Mode.GENERATION and cls.mode is Mode.CLASSIFICATION
        assert report.reduction == pytest.approx(
            (report.generation_seconds - report.classification_seconds) / report.generation_seconds)
