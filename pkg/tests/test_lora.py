import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.app.config import LoraConfig, ModelConfig, TrainConfig
from src.app.core.lora import (
    attach,
    attach_lora,
    lora_param_count,
    merge,
    merge_lora,
    trainable_param_count,
    validate_rank,
)
from src.app.core.model import TransformerLM
from src.app.core.numerics import Tensor, backward, no_grad
from src.app.exceptions import ConfigurationError, ContractError
from src.app.schema.schemas import Mode
from src.app.services.clsmode import build_cls_input, cls_batch_loss
from src.app.services.trainer import AdamW


def _cls_logits(model, text="hello"):
    item = build_cls_input("Is it stego?\n", text, model.max_seq_len)
    with no_grad():
        return model.forward_sequence_classification(item.token_ids).data


class TestAdapter:
    def test_default_alpha_is_twice_r(self):
        cfg = LoraConfig(r=64)
        assert cfg.lora_alpha == 128
        assert cfg.scale == 2.0

    def test_rank_limit(self):
        with pytest.raises(ConfigurationError):
            attach(Tensor(np.zeros((16, 16))), LoraConfig(r=9))

    def test_validate_rank_checks_every_target(self):
        model_config = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=64)
        validate_rank(model_config, LoraConfig(r=8, targets=["q", "fc"]))
        with pytest.raises(ConfigurationError):
            validate_rank(model_config, LoraConfig(r=9, targets=["fc"]))

    def test_delta_rank_bounded_by_r(self):
        adapter = attach(Tensor(np.zeros((64, 64))), LoraConfig(r=8), seed=0)
        adapter.B.data = np.random.default_rng(1).normal(size=adapter.B.shape)
        assert np.linalg.matrix_rank(adapter.delta()) <= 8

    def test_zero_b_merges_to_base_exactly(self):
        base = Tensor(np.random.default_rng(0).normal(size=(8, 6)))
        adapter = attach(base, LoraConfig(r=2), seed=0)
        np.testing.assert_array_equal(merge(adapter).data, base.data)

    def test_base_is_frozen(self):
        base = Tensor(np.ones((8, 8)), requires_grad=True)
        adapter = attach(base, LoraConfig(r=2), seed=0)
        assert not base.requires_grad
        assert adapter.A.requires_grad and adapter.B.requires_grad


class TestModelAdapters:
    def test_fresh_adapters_leave_logits_unchanged(self, tiny_config, lora_config):
        model = TransformerLM(tiny_config, seed=0, mode=Mode.CLASSIFICATION)
        before = _cls_logits(model)
        attach_lora(model, lora_config)
        np.testing.assert_allclose(_cls_logits(model), before, atol=1e-6)

    def test_only_adapters_and_head_train(self, tiny_config, lora_config):
        model = TransformerLM(tiny_config, seed=0, mode=Mode.CLASSIFICATION)
        attach_lora(model, lora_config)
        trainable = model.trainable_parameters()
        assert all(name.startswith("cls_head.") or ".lora_" in name for name in trainable)
        assert "layers.0.attn.q.weight.lora_A" in trainable

    def test_training_step_keeps_base_bitwise(self, tiny_config, lora_config):
        model = TransformerLM(tiny_config, seed=0, mode=Mode.CLASSIFICATION)
        attach_lora(model, lora_config)
        frozen = {name: p.data.copy() for name, p in model.params.items() if not name.startswith("cls_head.")}
        params = model.trainable_parameters()
        optimizer = AdamW(params, TrainConfig(lr=1e-2))
        inputs = [build_cls_input("", "abc"), build_cls_input("", "xyz")]
        backward(cls_batch_loss(model, inputs, [0, 1]))
        optimizer.step()
        for name, value in frozen.items():
            assert np.array_equal(model.params[name].data, value), name
        assert not np.all(model.adapters["layers.0.attn.q.weight"].B.data == 0)

    def test_merge_matches_adapter_forward(self, tiny_config, lora_config):
        model = TransformerLM(tiny_config, seed=0, mode=Mode.CLASSIFICATION)
        attach_lora(model, lora_config)
        rng = np.random.default_rng(2)
        for adapter in model.adapters.values():
            adapter.B.data = rng.normal(0.0, 0.3, size=adapter.B.shape).astype(np.float32)
        merged = merge_lora(model)
        assert merged.merged and not merged.adapters
        np.testing.assert_allclose(_cls_logits(merged), _cls_logits(model), atol=1e-5)

    def test_attach_twice(self, tiny_config, lora_config):
        model = TransformerLM(tiny_config, seed=0)
        attach_lora(model, lora_config)
        with pytest.raises(ContractError):
            attach_lora(model, lora_config)


class TestParamCount:
    def test_single_matrix(self):
        adapter = attach(Tensor(np.zeros((64, 64))), LoraConfig(r=8), seed=0)
        assert adapter.param_count == 1024

    def test_default_model(self):
        model_config = ModelConfig.preset("default")
        assert lora_param_count(model_config, LoraConfig(r=8)) == 16384

    def test_linear_in_r(self):
        model_config = ModelConfig.preset("default")
        assert lora_param_count(model_config, LoraConfig(r=4)) == 2 * lora_param_count(model_config, LoraConfig(r=2))

    def test_attached_count_matches_formula(self, tiny_config, lora_config):
        model = TransformerLM(tiny_config, seed=0, mode=Mode.CLASSIFICATION)
        attach_lora(model, lora_config)
        head = 16 * 2 + 2
        assert trainable_param_count(model) == lora_param_count(tiny_config, lora_config) + head
        assert trainable_param_count(model, include_head=False) == 2 * (16 * 2 + 2 * 16)
