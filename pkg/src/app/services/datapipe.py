"""
Corpus ingestion: filtering, class balancing, stratified splitting and record files.
"""

import json
import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from ..config import FilterRules, SplitSpec
from ..exceptions import ContractError, DataError, StorageError
from ..schema.schemas import Label, LabeledExample, RejectionEntry

logger = logging.getLogger(__name__)

PRINTABLE = re.compile(rb"[\x20-\x7e\t\n\r]")
SPLIT_NAMES = ("train", "val", "test")

Splits = Tuple[List[LabeledExample], List[LabeledExample], List[LabeledExample]]


def printable_fraction(text: Union[str, bytes]) -> float:
    data = text.encode("utf-8") if isinstance(text, str) else text
    if not data:
        return 1.0
    return len(PRINTABLE.findall(data)) / len(data)


def check_text(text: Union[str, bytes], rules: FilterRules) -> Optional[str]:
    """Name of the first failed rule, or None when the text is accepted."""
    data = text.encode("utf-8") if isinstance(text, str) else text
    if len(data) < rules.min_len:
        return "too_short"
    if len(data) > rules.max_len:
        return "too_long"
    if printable_fraction(data) < rules.min_printable:
        return "garbled"
    return None


def filter_corpus(corpus: Sequence[LabeledExample],
                  rules: FilterRules) -> Tuple[List[LabeledExample], List[RejectionEntry]]:
    """
    Apply the length and printable-fraction rules.

    Returns:
        Accepted examples in input order and the rejection log
    """
    accepted: List[LabeledExample] = []
    rejected: List[RejectionEntry] = []
    for index, example in enumerate(corpus):
        record_id = example.record_id if example.record_id is not None else index
        rule = check_text(example.text, rules)
        if rule is None:
            accepted.append(example)
        else:
            rejected.append(RejectionEntry(record_id=record_id, rule=rule))
    if rejected:
        logger.warning(f"Filter rejected {len(rejected)} of {len(corpus)} records")
    return accepted, rejected


def balance(covers: Sequence[LabeledExample], stegos: Sequence[LabeledExample], n_per_class: int,
            seed: int = 0) -> List[LabeledExample]:
    """Uniformly subsample n_per_class of each class and shuffle the union."""
    if n_per_class < 0:
        raise ContractError("n_per_class must be non-negative")
    deficits = {
        name: n_per_class - len(items)
        for name, items in (("cover", covers), ("stego", stegos))
        if len(items) < n_per_class
    }
    if deficits:
        detail = ", ".join(f"{name} short by {gap}" for name, gap in deficits.items())
        raise DataError(f"Not enough examples to balance {n_per_class} per class: {detail}")

    rng = np.random.default_rng(seed)
    chosen = [covers[i] for i in sorted(rng.choice(len(covers), n_per_class, replace=False))]
    chosen += [stegos[i] for i in sorted(rng.choice(len(stegos), n_per_class, replace=False))]
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order]


def split_sizes(n: int, ratios: Sequence[int]) -> Tuple[int, int, int]:
    total = sum(ratios)
    n_train = (n * ratios[0]) // total
    n_val = (n * ratios[1]) // total
    return n_train, n_val, n - n_train - n_val


def split(examples: Sequence[LabeledExample], spec: SplitSpec) -> Splits:
    """
    Stratified seeded split.

    Each class is shuffled, the classes are interleaved, and the interleaved
    sequence is cut into contiguous train/val/test blocks of sizes
    floor(r0 n / R), floor(r1 n / R) and the remainder. Each block is then
    shuffled on its own.
    """
    n = len(examples)
    if n < 10:
        raise DataError(f"Need at least 10 examples to split, got {n}")
    rng = np.random.default_rng(spec.seed)

    by_label: Dict[Label, List[LabeledExample]] = {Label.COVER: [], Label.STEGO: []}
    for example in examples:
        by_label[example.label].append(example)
    streams = [[items[i] for i in rng.permutation(len(items))] for items in by_label.values()]

    interleaved: List[LabeledExample] = []
    for pair in zip(*streams):
        interleaved.extend(pair)
    shorter = min(len(s) for s in streams)
    for stream in streams:
        interleaved.extend(stream[shorter:])

    n_train, n_val, _ = split_sizes(n, spec.ratios)
    blocks = (interleaved[:n_train], interleaved[n_train:n_train + n_val], interleaved[n_train + n_val:])
    train, val, test = ([block[i] for i in rng.permutation(len(block))] for block in blocks)
    return train, val, test


def write_corpus(path: Union[str, Path], examples: Iterable[LabeledExample],
                 header: Optional[str] = None) -> Path:
    """One JSON object per line with fields text, label, source, bpw; optional '# ' header line."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            if header:
                f.write(f"# {header}\n")
            for example in examples:
                record = {"text": example.text, "label": example.label.value,
                          "source": example.source, "bpw": example.bpw}
                f.write(json.dumps(record, ensure_ascii=False) + "\n")
    except OSError as e:
        raise StorageError(f"Could not write corpus {path}: {e}") from e
    return path


def read_corpus(path: Union[str, Path]) -> List[LabeledExample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Corpus file not found: {path}")
    examples = []
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                try:
                    examples.append(LabeledExample(**json.loads(line), record_id=len(examples)))
                except (ValueError, ValidationError) as e:
                    raise DataError(f"{path}:{line_no}: bad record: {e}") from e
    except OSError as e:
        raise StorageError(f"Could not read corpus {path}: {e}") from e
    return examples


def provenance(spec: SplitSpec) -> str:
    return f"seed={spec.seed} ratios={':'.join(str(r) for r in spec.ratios)}"


def write_splits(out_dir: Union[str, Path], splits: Splits, spec: SplitSpec) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    header = provenance(spec)
    return {name: write_corpus(out_dir / f"{name}.jsonl", part, header)
            for name, part in zip(SPLIT_NAMES, splits)}


def read_splits(split_dir: Union[str, Path]) -> Dict[str, List[LabeledExample]]:
    split_dir = Path(split_dir)
    missing = [name for name in SPLIT_NAMES if not (split_dir / f"{name}.jsonl").exists()]
    if missing:
        raise DataError(f"Missing split files in {split_dir}: {', '.join(missing)}")
    return {name: read_corpus(split_dir / f"{name}.jsonl") for name in SPLIT_NAMES}


def find_split_dirs(root: Union[str, Path]) -> Dict[str, Path]:
    """Dataset name -> split directory; ``root`` may itself be one split directory."""
    root = Path(root)
    if (root / "train.jsonl").exists():
        return {root.name: root}
    found = {p.name: p for p in sorted(root.iterdir()) if (p / "train.jsonl").exists()} if root.is_dir() else {}
    if not found:
        raise DataError(f"No prepared splits under {root}; run 'prepare' first")
    return found


def prepare_dataset(covers: Sequence[LabeledExample], stegos: Sequence[LabeledExample],
                    rules: FilterRules, spec: SplitSpec) -> Tuple[Splits, List[RejectionEntry]]:
    """Filter, balance (when n_per_class is set) and split one cover/stego pairing."""
    covers, rejected_covers = filter_corpus(covers, rules)
    stegos, rejected_stegos = filter_corpus(stegos, rules)
    if not covers or not stegos:
        raise DataError("Filtering left an empty class")
    n = spec.n_per_class
    if n is None:
        n = min(len(covers), len(stegos))
    examples = balance(covers, stegos, n, spec.seed)
    logger.info(f"Balanced corpus: {n} cover + {n} stego")
    return split(examples, spec), rejected_covers + rejected_stegos
