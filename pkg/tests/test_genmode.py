import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.app.config import GenerationBudget, GenerationSettings, ModelConfig
from src.app.core.model import TransformerLM
from src.app.core.tokenizer import BOS, EOS, encode
from src.app.exceptions import ContractError, SequenceLengthError
from src.app.prompts import STEGANALYSIS_DESCRIPTION, STEGANALYSIS_INSTRUCTION
from src.app.schema.schemas import Label, Verdict
from src.app.services.genmode import (
    GenerationDetector,
    PromptTemplate,
    build_prompt,
    generate,
    genmode_batch_loss,
    genmode_loss,
    parse_label,
    response_ids,
)


class TestPromptTemplate:
    def test_sections_in_order(self):
        template = PromptTemplate.from_text("D:{description}|I:{instruction}|X:{input}|R:", "desc", "inst")
        assert template.render("payload") == b"D:desc|I:inst|X:payload|R:"

    def test_placeholders_required_once(self):
        with pytest.raises(ContractError):
            PromptTemplate.from_text("{description}{instruction}")
        with pytest.raises(ContractError):
            PromptTemplate.from_text("{instruction}{description}{input}")

    def test_bundled_template(self):
        template = PromptTemplate.from_file()
        rendered = template.render("hello").decode()
        assert rendered.startswith("### Description:\n" + STEGANALYSIS_DESCRIPTION)
        assert STEGANALYSIS_INSTRUCTION in rendered
        assert rendered.endswith("### Input:\nhello\n\n### Response:\n")

    def test_settings_override_description(self):
        settings = GenerationSettings(template="concise.txt", description="short")
        template = PromptTemplate.from_settings(settings)
        assert template.render("x").startswith(b"Task: short\n")


class TestBuildPrompt:
    def test_prompt_length_counts_every_section(self):
        template = PromptTemplate.from_file()
        ids = build_prompt(template, "x" * 10)
        assert ids[0] == BOS
        assert len(ids) == len(template.render("")) + 10 + 1
        assert bytes(ids[1:]).endswith(b"### Response:\n")

    def test_default_prompt_fits_context_with_budget(self):
        template = PromptTemplate.from_file()
        ids = build_prompt(template, "x" * 64, 512, GenerationBudget())
        assert len(ids) + 16 <= 512

    def test_overlength_asks_to_shorten(self):
        template = PromptTemplate.from_file()
        with pytest.raises(SequenceLengthError, match="shorten the payload"):
            build_prompt(template, "x" * 600, 512, GenerationBudget())


class TestGenerate:
    def test_immediate_eos(self, scripted_lm):
        model = scripted_lm([EOS])
        assert generate(model, [BOS, 65], GenerationBudget()) == [EOS]
        assert model.forward_passes == 1

    def test_scripted_verdict(self, scripted_lm):
        script = list(b"stego") + [EOS]
        model = scripted_lm(script)
        out = generate(model, [BOS, 65], GenerationBudget())
        assert out == script
        assert model.forward_passes == 6

    def test_budget_cap(self, scripted_lm):
        model = scripted_lm([ord("x")])
        assert generate(model, [BOS], GenerationBudget(max_new_tokens=3)) == [ord("x")] * 3

    def test_greedy_is_deterministic(self, tiny_config):
        model = TransformerLM(tiny_config, seed=4)
        budget = GenerationBudget(max_new_tokens=5)
        assert generate(model, [BOS, 1, 2], budget) == generate(model, [BOS, 1, 2], budget)

    def test_only_greedy_decoding(self):
        with pytest.raises(ValueError):
            GenerationBudget(temperature=0.7)


class TestParseLabel:
    @pytest.mark.parametrize("text, verdict", [
        ("This text is a stego.", Verdict.STEGO),
        ("Cover.", Verdict.COVER),
        ("no verdict", Verdict.UNPARSEABLE),
        ("cover, not stego", Verdict.COVER),
        (b"STEGO", Verdict.STEGO),
    ])
    def test_keywords(self, text, verdict):
        assert parse_label(text) is verdict


class TestGenmodeLoss:
    def test_response_ids_end_with_eos(self):
        assert response_ids(Label.STEGO) == encode("stego") + [EOS]

    def test_scores_response_and_eos_only(self, tiny_config):
        model = TransformerLM(tiny_config, seed=0)
        _, scored = genmode_batch_loss(model, [([BOS, 1, 2, 3], [7]), ([BOS, 4], response_ids(Label.COVER))])
        assert scored == 2 + 6

    def test_uniform_model_loss(self):
        config = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=8, max_seq_len=16, dropout=0.0)
        model = TransformerLM(config, seed=0)
        model.params["lm_head.weight"].data[...] = 0.0
        model.params["lm_head.bias"].data[...] = 0.0
        loss = genmode_loss(model, [BOS, 10, 11], [12, 13]).item()
        assert loss == pytest.approx(np.log(259), abs=1e-4)

    def test_certain_model_has_zero_loss(self):
        config = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=8, max_seq_len=16, dropout=0.0)
        model = TransformerLM(config, seed=0)
        model.params["lm_head.weight"].data[...] = 0.0
        bias = np.full(259, -50.0, dtype=np.float32)
        bias[EOS] = 50.0
        model.params["lm_head.bias"].data[...] = bias
        assert genmode_loss(model, [BOS, 10], [EOS]).item() == pytest.approx(0.0, abs=1e-6)

    def test_empty_prompt(self, tiny_config):
        with pytest.raises(ContractError):
            genmode_loss(TransformerLM(tiny_config, seed=0), [], [7])

    def test_overlength_pair(self, tiny_config):
        model = TransformerLM(tiny_config, seed=0)
        with pytest.raises(SequenceLengthError):
            genmode_loss(model, [BOS] + [1] * tiny_config.max_seq_len, [7])


class TestGenerationDetector:
    def test_detects_scripted_verdict(self, scripted_lm):
        template = PromptTemplate.from_text("{description}{instruction}{input}>", "", "")
        detector = GenerationDetector(scripted_lm(list(b" cover") + [EOS]), template)
        assert detector.detect("some text") is Verdict.COVER

    def test_unparseable_generation(self, scripted_lm):
        template = PromptTemplate.from_text("{description}{instruction}{input}>", "", "")
        detector = GenerationDetector(scripted_lm([ord("?")]), template, GenerationBudget(max_new_tokens=4))
        assert detector.detect_all(["a"]) == [Verdict.UNPARSEABLE]
