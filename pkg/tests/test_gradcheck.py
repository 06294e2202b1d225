import sys
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.app.exceptions import NumericError
from src.app.services.gradcheck import assert_gradcheck, relative_error, run_gradcheck


class TestGradcheck:
    def test_relative_error(self):
        a = np.array([1.0, 2.0])
        assert relative_error(a, a) == 0.0
        assert relative_error(np.zeros(2), np.zeros(2)) == 0.0

    def test_relative_error_catches_one_bad_element(self):
        analytic = np.ones(10000)
        numeric = np.ones(10000)
        analytic[0], numeric[0] = 1e-3, 2e-3
        assert relative_error(analytic, numeric) == pytest.approx(1 / 3)

    def test_relative_error_floor_for_tiny_gradients(self):
        assert relative_error(np.array([1e-12]), np.array([0.0])) < 1e-7

    def test_every_primitive_passes(self):
        results = run_gradcheck(seed=0, include_model=False)
        assert {r.check for r in results} >= {"matmul", "softmax", "layer_norm", "gelu", "cross_entropy", "dropout"}
        assert_gradcheck(results)

    def test_whole_model_passes(self):
        results = run_gradcheck(seed=1)
        assert any(r.check == "model:classification" and "lora_B" in r.parameter for r in results)
        assert_gradcheck(results)

    @patch("src.app.core.numerics._gelu_adjoint", lambda g, x: g * 0.5)
    def test_broken_adjoint_is_named(self):
        results = run_gradcheck(seed=0, include_model=False)
        with pytest.raises(NumericError, match="gelu"):
            assert_gradcheck(results)

    @patch("src.app.core.numerics._dropout_adjoint", lambda g, keep: g)
    def test_dropout_adjoint_must_apply_the_mask(self):
        results = run_gradcheck(seed=0, include_model=False)
        failed = {r.check for r in results if not r.passed}
        assert failed == {"dropout"}
