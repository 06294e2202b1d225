import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.app.config import FilterRules, SplitSpec
from src.app.exceptions import DataError
from src.app.schema.schemas import Label, LabeledExample
from src.app.services.datapipe import (
    balance,
    check_text,
    filter_corpus,
    find_split_dirs,
    prepare_dataset,
    printable_fraction,
    read_corpus,
    read_splits,
    split,
    split_sizes,
    write_corpus,
    write_splits,
)


def _examples(n, label, start=0, text="sample text number {i:04d}"):
    return [LabeledExample(text=text.format(i=start + i), label=label, record_id=start + i) for i in range(n)]


class TestFilter:
    def test_rules(self):
        rules = FilterRules(min_len=16, max_len=40, min_printable=0.95)
        assert check_text("abc", rules) == "too_short"
        assert check_text("x" * 41, rules) == "too_long"
        assert check_text(b"\x00\x01" * 10 + b"a" * 20, rules) == "garbled"
        assert check_text("a perfectly normal line", rules) is None

    def test_printable_fraction(self):
        assert printable_fraction("tab\tand newline\n") == 1.0
        assert printable_fraction(b"\x00a") == 0.5

    def test_rejection_log(self):
        corpus = [LabeledExample(text="short", label=Label.COVER, record_id=7),
                  LabeledExample(text="long enough to be accepted", label=Label.COVER, record_id=8)]
        accepted, rejected = filter_corpus(corpus, FilterRules())
        assert [e.record_id for e in accepted] == [8]
        assert [(r.record_id, r.rule) for r in rejected] == [(7, "too_short")]

    def test_accept_all_is_identity(self):
        corpus = _examples(5, Label.COVER)
        accepted, rejected = filter_corpus(corpus, FilterRules(min_len=0, max_len=1000, min_printable=0.0))
        assert accepted == corpus and rejected == []

    def test_idempotent(self):
        corpus = _examples(3, Label.COVER) + [LabeledExample(text="tiny", label=Label.STEGO)]
        once, _ = filter_corpus(corpus, FilterRules())
        twice, _ = filter_corpus(once, FilterRules())
        assert once == twice


class TestBalance:
    def test_subsamples_each_class(self):
        chosen = balance(_examples(1200, Label.COVER), _examples(1000, Label.STEGO, 5000), 1000, seed=0)
        assert sum(e.label is Label.COVER for e in chosen) == 1000
        assert sum(e.label is Label.STEGO for e in chosen) == 1000

    def test_zero(self):
        assert balance(_examples(3, Label.COVER), _examples(3, Label.STEGO), 0) == []

    def test_deficit_is_named(self):
        with pytest.raises(DataError, match="stego short by 2"):
            balance(_examples(5, Label.COVER), _examples(3, Label.STEGO), 5)


class TestSplit:
    def test_sizes(self):
        assert split_sizes(1000, (6, 2, 2)) == (600, 200, 200)
        assert split_sizes(11, (6, 2, 2)) == (6, 2, 3)

    def test_split_is_stratified_and_disjoint(self):
        examples = _examples(50, Label.COVER) + _examples(50, Label.STEGO, 100)
        train, val, test = split(examples, SplitSpec(seed=1))
        assert (len(train), len(val), len(test)) == (60, 20, 20)
        for part in (train, val, test):
            covers = sum(e.label is Label.COVER for e in part)
            assert abs(2 * covers - len(part)) <= 1
        ids = [e.record_id for part in (train, val, test) for e in part]
        assert len(set(ids)) == 100

    def test_small_balanced_split(self):
        examples = _examples(5, Label.COVER) + _examples(5, Label.STEGO, 100)
        for part in split(examples, SplitSpec(seed=3)):
            covers = sum(e.label is Label.COVER for e in part)
            assert abs(2 * covers - len(part)) <= 1

    def test_seeded(self):
        examples = _examples(20, Label.COVER) + _examples(20, Label.STEGO, 100)
        first = [e.record_id for e in split(examples, SplitSpec(seed=4))[0]]
        again = [e.record_id for e in split(examples, SplitSpec(seed=4))[0]]
        other = [e.record_id for e in split(examples, SplitSpec(seed=5))[0]]
        assert first == again
        assert first != other

    def test_too_few(self):
        with pytest.raises(DataError):
            split(_examples(4, Label.COVER) + _examples(4, Label.STEGO, 10), SplitSpec())


class TestFiles:
    def test_corpus_file_round_trip(self, tmp_path):
        examples = _examples(3, Label.STEGO)
        path = write_corpus(tmp_path / "c.jsonl", examples, header="seed=0 source=test")
        assert path.read_text().startswith("# seed=0 source=test\n")
        loaded = read_corpus(path)
        assert [(e.text, e.label) for e in loaded] == [(e.text, e.label) for e in examples]
        assert [e.record_id for e in loaded] == [0, 1, 2]

    def test_bad_record(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"text": "x", "label": "maybe"}\n')
        with pytest.raises(DataError, match="bad.jsonl:1"):
            read_corpus(path)

    def test_missing_corpus(self, tmp_path):
        with pytest.raises(DataError):
            read_corpus(tmp_path / "nope.jsonl")

    def test_splits_round_trip(self, tmp_path):
        spec = SplitSpec(seed=2, n_per_class=None)
        covers = _examples(10, Label.COVER)
        stegos = _examples(10, Label.STEGO, 100)
        splits, rejected = prepare_dataset(covers, stegos, FilterRules(), spec)
        assert rejected == []
        write_splits(tmp_path / "splits" / "huffman-h1", splits, spec)
        assert (tmp_path / "splits" / "huffman-h1" / "train.jsonl").read_text().startswith("# seed=2 ratios=6:2:2")
        found = find_split_dirs(tmp_path / "splits")
        assert list(found) == ["huffman-h1"]
        loaded = read_splits(found["huffman-h1"])
        assert [len(loaded[name]) for name in ("train", "val", "test")] == [12, 4, 4]

    def test_no_splits(self, tmp_path):
        with pytest.raises(DataError, match="prepare"):
            find_split_dirs(tmp_path)

    def test_missing_split_file(self, tmp_path):
        write_corpus(tmp_path / "train.jsonl", _examples(2, Label.COVER))
        with pytest.raises(DataError, match="val"):
            read_splits(tmp_path)
