import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.app.core.tokenizer import BOS, EOS, PAD, VOCAB_SIZE, ByteTokenizer, decode, encode
from src.app.exceptions import VocabularyError


class TestByteTokenizer:
    def test_special_ids(self):
        assert (PAD, BOS, EOS, VOCAB_SIZE) == (256, 257, 258, 259)

    def test_encode(self):
        assert encode("ab", add_bos=True, add_eos=True) == [257, 97, 98, 258]
        assert encode("", add_bos=True, add_eos=True) == [257, 258]

    def test_decode(self):
        assert decode([97]) == b"a"
        assert decode([257, 258]) == b""
        assert decode([115, 116, 101, 103, 111]) == b"stego"

    def test_decode_skips_specials_without_stopping(self):
        assert decode([97, 258, 98, 256, 257]) == b"ab"

    def test_decode_rejects_unknown_ids(self):
        with pytest.raises(VocabularyError):
            decode([259])

    def test_round_trip_random_bytes(self):
        rng = np.random.default_rng(0)
        tok = ByteTokenizer()
        for _ in range(200):
            data = bytes(rng.integers(0, 256, size=int(rng.integers(0, 40))).tolist())
            assert tok.decode(tok.encode(data, add_bos=True, add_eos=True)) == data

    def test_decode_text_replaces_invalid_utf8(self):
        assert ByteTokenizer().decode_text([0xFF, 97]) == "�a"
