"""
Labeled corpus factory.

A seeded byte-level Markov language model samples cover texts. The Huffman
embedder steers the same model with secret bits to produce stego texts: at every
step the conditional distribution, cut down to its top 2^h candidates, is turned
into a prefix-free code and the token whose code prefixes the remaining bits is
emitted. ``h`` is the concealment dial; None keeps the full support.
"""

import heapq
import itertools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import Config, SynthConfig
from ..exceptions import ContractError, DataError, ExtractionError, StorageError
from ..schema.schemas import Label, LabeledExample, StegoRecord

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.Generator, None]

COVER_SOURCE = "markov-cover"
MIX_SOURCE = "huffman-mix"


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def dial_name(h: Optional[int]) -> str:
    return "full" if h is None else f"h{h}"


def dial_source(h: Optional[int]) -> str:
    return f"huffman-{dial_name(h)}"


def load_seed_corpus(path=None) -> str:
    """Read the bundled seed text with whitespace runs collapsed to single spaces."""
    path = path or Config.SEED_CORPUS_FILE
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as e:
        raise DataError(f"Seed corpus {path} must be ASCII: {e}") from e
    except OSError as e:
        raise StorageError(f"Could not read seed corpus {path}: {e}") from e
    return re.sub(r"\s+", " ", text).strip()


class MarkovLM:
    """
    Order-k byte model with Dirichlet smoothing toward the corpus unigram.

    p(x | c) = (n(c, x) + beta * u(x)) / (n(c) + beta), beta = smoothing * |alphabet|,
    over the bytes observed in training. Contexts shorter than k use the
    matching lower-order table.
    """

    def __init__(self, order: int = 3, smoothing: float = 0.05):
        if not 1 <= order <= 6:
            raise ContractError("Markov order must be between 1 and 6")
        if smoothing <= 0:
            raise ContractError("smoothing must be positive")
        self.order = order
        self.smoothing = smoothing
        self.alphabet: np.ndarray = np.zeros(0, dtype=np.int64)
        self.unigram: np.ndarray = np.zeros(0)
        self._index: Dict[int, int] = {}
        self._counts: Dict[bytes, np.ndarray] = {}
        self._cache: Dict[bytes, np.ndarray] = {}
        self._codebooks: Dict[Tuple[bytes, Optional[int]], "HuffmanCodebook"] = {}

    @classmethod
    def from_text(cls, text: Union[str, bytes], order: int = 3, smoothing: float = 0.05) -> "MarkovLM":
        return cls(order, smoothing).fit(text)

    def fit(self, text: Union[str, bytes]) -> "MarkovLM":
        data = text.encode("ascii") if isinstance(text, str) else bytes(text)
        if len(data) <= self.order:
            raise DataError(f"Training text needs more than {self.order} bytes")
        self.alphabet = np.array(sorted(set(data)), dtype=np.int64)
        self._index = {int(b): i for i, b in enumerate(self.alphabet)}
        size = len(self.alphabet)

        raw = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        lookup = np.zeros(256, dtype=np.int64)
        lookup[self.alphabet] = np.arange(size)
        codes = lookup[raw]
        self.unigram = np.bincount(codes, minlength=size).astype(np.float64)
        self.unigram /= self.unigram.sum()

        counts: Dict[bytes, np.ndarray] = {}
        for k in range(1, self.order + 1):
            windows = np.lib.stride_tricks.sliding_window_view(raw, k + 1)
            keys = np.zeros(len(windows), dtype=np.int64)
            for j in range(k):
                keys = keys * 256 + windows[:, j]
            pairs, freq = np.unique(keys * size + codes[k:], return_counts=True)
            contexts, starts = np.unique(pairs // size, return_index=True)
            for context, lo, hi in zip(contexts, starts, list(starts[1:]) + [len(pairs)]):
                row = np.zeros(size, dtype=np.float64)
                row[pairs[lo:hi] % size] = freq[lo:hi]
                counts[int(context).to_bytes(k, "big")] = row
        self._counts = counts
        self._cache.clear()
        self._codebooks.clear()
        logger.info(f"Fitted order-{self.order} Markov model on {len(data)} bytes, "
                    f"alphabet {size}, {len(self._counts)} contexts")
        return self

    @property
    def beta(self) -> float:
        return self.smoothing * len(self.alphabet)

    def context_of(self, history: bytes) -> bytes:
        return bytes(history[-self.order:]) if self.order else b""

    def distribution(self, history: bytes) -> np.ndarray:
        """Conditional probabilities over ``alphabet`` given the preceding bytes."""
        if not len(self.alphabet):
            raise ContractError("MarkovLM is not fitted")
        context = self.context_of(history)
        cached = self._cache.get(context)
        if cached is not None:
            return cached
        counts = self._counts.get(context)
        if counts is None:
            probs = self.unigram.copy()
        else:
            probs = (counts + self.beta * self.unigram) / (counts.sum() + self.beta)
        self._cache[context] = probs
        return probs

    def dist_map(self, history: bytes) -> Dict[int, float]:
        return {int(b): float(p) for b, p in zip(self.alphabet, self.distribution(history))}

    def codebook(self, history: bytes, h: Optional[int]) -> "HuffmanCodebook":
        key = (self.context_of(history), h)
        book = self._codebooks.get(key)
        if book is None:
            book = build_huffman(self.dist_map(history), h)
            self._codebooks[key] = book
        return book

    def sample_next(self, history: bytes, rng: np.random.Generator) -> int:
        probs = self.distribution(history)
        index = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
        return int(self.alphabet[min(index, len(self.alphabet) - 1)])

    def probability(self, history: bytes, token: int) -> float:
        index = self._index.get(int(token))
        return 0.0 if index is None else float(self.distribution(history)[index])


@dataclass
class _Node:
    prob: float
    min_token: int
    token: Optional[int] = field(default=None, compare=False)
    left: Optional["_Node"] = field(default=None, compare=False)
    right: Optional["_Node"] = field(default=None, compare=False)


class HuffmanCodebook:
    """Prefix-free token codes over a candidate pool."""

    def __init__(self, codes: Mapping[int, str]):
        self.codes: Dict[int, str] = dict(codes)
        self._by_code = {code: token for token, code in self.codes.items()}
        self._max_len = max((len(c) for c in self.codes.values()), default=0)

    def __contains__(self, token: int) -> bool:
        return token in self.codes

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def candidates(self) -> List[int]:
        return sorted(self.codes)

    def kraft_sum(self) -> float:
        return float(sum(2.0 ** -len(code) for code in self.codes.values()))

    def is_prefix_free(self) -> bool:
        ordered = sorted(self.codes.values())
        return all(not b.startswith(a) for a, b in zip(ordered, ordered[1:]))

    def match(self, bits: str, pos: int) -> Tuple[int, int]:
        """
        Token whose code prefixes ``bits[pos:]``.

        A tail shorter than the matching code is padded with zeros.

        Returns:
            (token, number of real bits consumed)
        """
        remaining = len(bits) - pos
        for length in range(0, self._max_len + 1):
            chunk = bits[pos:pos + length]
            if len(chunk) < length:
                chunk = chunk + "0" * (length - len(chunk))
            token = self._by_code.get(chunk)
            if token is not None:
                return token, min(length, remaining)
        raise ContractError("Codebook is not complete")


def build_huffman(dist: Mapping[int, float], h: Optional[int] = None) -> HuffmanCodebook:
    """
    Huffman code over the top 2^h tokens of a distribution.

    Candidates are ranked by probability, ties by token id, and re-normalized.
    Merges pop the lowest (probability, smallest token id) first; the first
    popped node takes bit 0.

    Args:
        dist: Token -> probability
        h: Pool exponent, None for the full support

    Returns:
        HuffmanCodebook
    """
    support = [(token, p) for token, p in dist.items() if p > 0]
    if not support:
        raise ContractError("Cannot build a Huffman code from an empty distribution")
    if h is not None and h < 0:
        raise ContractError(f"Pool exponent must be non-negative, got {h}")
    ranked = sorted(support, key=lambda item: (-item[1], item[0]))
    pool = ranked if h is None else ranked[:min(2 ** h, len(ranked))]
    total = sum(p for _, p in pool)

    if len(pool) == 1:
        return HuffmanCodebook({pool[0][0]: ""})

    counter = itertools.count()
    heap = [(p / total, token, next(counter), _Node(p / total, token, token)) for token, p in pool]
    heapq.heapify(heap)
    while len(heap) > 1:
        p0, t0, _, left = heapq.heappop(heap)
        p1, t1, _, right = heapq.heappop(heap)
        merged = _Node(p0 + p1, min(t0, t1), left=left, right=right)
        heapq.heappush(heap, (merged.prob, merged.min_token, next(counter), merged))

    codes: Dict[int, str] = {}

    def walk(node: _Node, prefix: str):
        if node.token is not None:
            codes[node.token] = prefix
            return
        walk(node.left, prefix + "0")
        walk(node.right, prefix + "1")

    walk(heap[0][3], "")
    return HuffmanCodebook(codes)


def sample_cover(lm: MarkovLM, length: int, seed: Seed = None) -> str:
    """Sample ``length`` bytes from the model's conditionals."""
    if length < lm.order:
        raise ContractError(f"length {length} is shorter than the Markov order {lm.order}")
    rng = _rng(seed)
    out = bytearray()
    for _ in range(length):
        out.append(lm.sample_next(bytes(out), rng))
    return out.decode("ascii")


def random_bits(n: int, seed: Seed = None) -> str:
    return "".join("1" if b else "0" for b in _rng(seed).integers(0, 2, size=n))


def embed(lm: MarkovLM, bits: str, length: int, h: Optional[int] = None, seed: Seed = None) -> StegoRecord:
    """
    Emit ``length`` bytes carrying ``bits``.

    While bits remain each step emits the token whose code prefixes them;
    afterwards the model is sampled normally.
    """
    if length < lm.order:
        raise ContractError(f"length {length} is shorter than the Markov order {lm.order}")
    if bits and set(bits) - {"0", "1"}:
        raise ContractError("bits must be a string of '0' and '1'")
    rng = _rng(seed)
    out = bytearray()
    pos = 0
    for _ in range(length):
        history = bytes(out)
        if pos < len(bits):
            token, used = lm.codebook(history, h).match(bits, pos)
            pos += used
        else:
            token = lm.sample_next(history, rng)
        out.append(token)
    return StegoRecord(text=out.decode("ascii"), bits_embedded=pos, token_count=length, dial=h)


def extract(lm: MarkovLM, text: Union[str, bytes], bit_count: int, h: Optional[int] = None) -> str:
    """Replay the codebooks over ``text`` and return its first ``bit_count`` secret bits."""
    if bit_count == 0:
        return ""
    data = text.encode("ascii") if isinstance(text, str) else bytes(text)
    collected: List[str] = []
    n = 0
    for i, token in enumerate(data):
        if n >= bit_count:
            break
        book = lm.codebook(data[:i], h)
        if token not in book:
            raise ExtractionError(
                f"Byte {token!r} at position {i} is outside the candidate pool (h={dial_name(h)}); "
                "the text was not embedded with these parameters"
            )
        code = book.codes[token]
        collected.append(code)
        n += len(code)
    if n < bit_count:
        raise ExtractionError(f"Text carries {n} bits, fewer than the requested {bit_count}")
    return "".join(collected)[:bit_count]


def byte_kl_divergence(sample_texts: Iterable[str], reference_texts: Iterable[str], alpha: float = 0.5) -> float:
    """KL(sample || reference) between add-alpha smoothed byte unigram estimates."""

    def estimate(texts: Iterable[str]) -> np.ndarray:
        counts = np.zeros(256, dtype=np.float64)
        for text in texts:
            data = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
            counts += np.bincount(data, minlength=256)
        if counts.sum() == 0:
            raise DataError("Cannot estimate a byte distribution from empty texts")
        counts += alpha
        return counts / counts.sum()

    p = estimate(sample_texts)
    q = estimate(reference_texts)
    return float(max(0.0, np.sum(p * np.log(p / q))))


def synthesize_mixed(lm: MarkovLM, dials: Sequence[Optional[int]], n: int, min_length: int,
                     max_length: int, seed: Seed = None) -> List[LabeledExample]:
    """Stego examples spread evenly across several dials, tagged as one mixed source."""
    if not dials:
        raise ContractError("Mixed synthesis needs at least one dial")
    rng = _rng(seed)
    examples = []
    for i in range(n):
        h = dials[i % len(dials)]
        record = _stego_record(lm, h, min_length, max_length, rng)
        if record.bits_embedded == 0:
            logger.warning(f"Dial {dial_name(h)} embedded no bits; mixed record dropped")
            continue
        examples.append(LabeledExample(text=record.text, label=Label.STEGO,
                                       source=f"{MIX_SOURCE}:{dial_name(h)}", bpw=record.bpw))
    return examples


def _stego_record(lm: MarkovLM, h, min_length: int, max_length: int, rng: np.random.Generator) -> StegoRecord:
    length = int(rng.integers(min_length, max_length + 1))
    # Enough bits that every emitted byte carries payload
    bits = random_bits(8 * length, rng)
    return embed(lm, bits, length, h, rng)


class CorpusSynthesizer:
    def __init__(self, lm: MarkovLM, config: Optional[SynthConfig] = None):
        """
        Generate cover and stego corpora from one Markov model.

        Args:
            lm: Fitted Markov model
            config: Counts, lengths, dials and seed
        """
        self.lm = lm
        self.config = config or SynthConfig()

    @classmethod
    def from_seed_corpus(cls, config: Optional[SynthConfig] = None, path=None) -> "CorpusSynthesizer":
        config = config or SynthConfig()
        lm = MarkovLM.from_text(load_seed_corpus(path), order=config.order, smoothing=config.smoothing)
        return cls(lm, config)

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, stream])

    def covers(self, n: Optional[int] = None) -> List[LabeledExample]:
        cfg = self.config
        rng = self._rng(0)
        examples = []
        for _ in range(cfg.n_cover if n is None else n):
            length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
            examples.append(LabeledExample(text=sample_cover(self.lm, length, rng), label=Label.COVER,
                                           source=COVER_SOURCE, bpw=0.0))
        return examples

    def stegos(self, h: Optional[int], n: Optional[int] = None) -> List[LabeledExample]:
        cfg = self.config
        rng = self._rng(1 + (0 if h is None else h + 1))
        examples = []
        for _ in range(cfg.n_stego if n is None else n):
            record = _stego_record(self.lm, h, cfg.min_length, cfg.max_length, rng)
            if record.bits_embedded == 0:
                logger.warning(f"Dial {dial_name(h)} embedded no bits; record dropped")
                continue
            examples.append(LabeledExample(text=record.text, label=Label.STEGO,
                                           source=dial_source(h), bpw=record.bpw))
        return examples

    def mixed(self, n: Optional[int] = None) -> List[LabeledExample]:
        cfg = self.config
        return synthesize_mixed(self.lm, cfg.dials, cfg.n_stego if n is None else n,
                                cfg.min_length, cfg.max_length, self._rng(99))

    def corpora(self) -> Dict[str, List[LabeledExample]]:
        """All configured corpora keyed by file stem: cover, one per dial, and the mix when enabled."""
        result = {"cover": self.covers()}
        for h in self.config.dials:
            result[dial_source(h)] = self.stegos(h)
        if self.config.mix:
            result[MIX_SOURCE] = self.mixed()
        return result
