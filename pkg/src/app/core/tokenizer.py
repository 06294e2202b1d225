from typing import Iterable, List, Union

from ..config import Config
from ..exceptions import VocabularyError

PAD = Config.PAD_ID
BOS = Config.BOS_ID
EOS = Config.EOS_ID
VOCAB_SIZE = Config.VOCAB_SIZE
SPECIAL_TOKENS = {"<pad>": PAD, "<s>": BOS, "</s>": EOS}

Text = Union[bytes, bytearray, str]


def _to_bytes(text: Text) -> bytes:
    if isinstance(text, str):
        return text.encode("utf-8")
    return bytes(text)


class ByteTokenizer:
    """Byte-level vocabulary: ids 0..255 are raw bytes, followed by PAD, BOS and EOS."""

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    vocab_size = VOCAB_SIZE

    def encode(self, text: Text, add_bos: bool = False, add_eos: bool = False) -> List[int]:
        ids = list(_to_bytes(text))
        if add_bos:
            ids.insert(0, BOS)
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int]) -> bytes:
        payload = bytearray()
        for token in ids:
            token = int(token)
            if token < 0 or token >= VOCAB_SIZE:
                raise VocabularyError(f"Token id {token} is outside the vocabulary [0, {VOCAB_SIZE})")
            if token < 256:
                payload.append(token)
        return bytes(payload)

    def decode_text(self, ids: Iterable[int]) -> str:
        return self.decode(ids).decode("utf-8", errors="replace")


_default = ByteTokenizer()


def encode(text: Text, add_bos: bool = False, add_eos: bool = False) -> List[int]:
    return _default.encode(text, add_bos=add_bos, add_eos=add_eos)


def decode(ids: Iterable[int]) -> bytes:
    return _default.decode(ids)
