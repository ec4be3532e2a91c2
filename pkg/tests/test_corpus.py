"""Synthetic task generation, JSONL round trips, and deterministic splits."""

import json

import numpy as np
import pytest

from flowlab.corpus import PairRecord, gen_task, load_jsonl, save_jsonl, split
from flowlab.textspace import SPECIALS, UNK_ID, Vocab
from flowlab.corpus import content_alphabet


class TestGenTask:
    def test_copy(self):
        recs = gen_task("COPY", 20, (3, 5), 10, seed=0)
        assert all(r.src == r.trg for r in recs)

    def test_reverse(self):
        recs = gen_task("REVERSE", 20, (3, 5), 10, seed=1)
        for r in recs:
            assert r.trg.split() == r.src.split()[::-1]

    def test_simplify_drops_odd_indices(self):
        recs = gen_task("SIMPLIFY", 20, (4, 6), 10, seed=2)
        for r in recs:
            assert r.trg.split() == r.src.split()[0::2]

    def test_simplify_hand_case_rule(self):
        # "a b c d" -> "a c" under the deterministic deletion rule
        toks = "a b c d".split()
        assert toks[0::2] == ["a", "c"]

    def test_paraphrase_is_bijection(self):
        recs = gen_task("PARAPHRASE", 50, (3, 6), 12, seed=3)
        mapping = {}
        for r in recs:
            for s, t in zip(r.src.split(), r.trg.split()):
                assert mapping.setdefault(s, t) == t
        assert len(set(mapping.values())) == len(mapping)

    def test_deterministic_given_seed(self):
        a = gen_task("PARAPHRASE", 30, (3, 6), 8, seed=9)
        b = gen_task("PARAPHRASE", 30, (3, 6), 8, seed=9)
        assert a == b

    def test_lengths_within_range(self):
        recs = gen_task("COPY", 100, (2, 7), 5, seed=4)
        lens = {len(r.src.split()) for r in recs}
        assert lens <= set(range(2, 8))

    def test_tokens_roundtrip_through_vocab_without_unk(self):
        n = 16
        vocab = Vocab(SPECIALS + content_alphabet(n))
        for kind in ("COPY", "REVERSE", "SIMPLIFY", "PARAPHRASE"):
            for r in gen_task(kind, 30, (2, 6), n, seed=5):
                assert UNK_ID not in vocab.encode(r.src)
                assert UNK_ID not in vocab.encode(r.trg)

    def test_infeasible_range_rejected(self):
        with pytest.raises(ValueError):
            gen_task("COPY", 5, (6, 3), 8, seed=0)
        with pytest.raises(ValueError):
            gen_task("NOPE", 5, (3, 6), 8, seed=0)


class TestJsonl:
    def test_direct_mapping(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text('{"src":"a","trg":"b"}\n', encoding="utf-8")
        assert load_jsonl(p) == [PairRecord("a", "b")]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("", encoding="utf-8")
        assert load_jsonl(p) == []

    def test_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text('{"src":"a","trg":"b"}\n\n{"src":"c","trg":"d"}\n'
                     '{"src":"e","trg":"f"}\n\n', encoding="utf-8")
        assert len(load_jsonl(p)) == 3

    def test_malformed_reports_line_number(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"src":"a","trg":"b"}\nnot json\n', encoding="utf-8")
        with pytest.raises(ValueError, match=":2:"):
            load_jsonl(p)

    def test_missing_field_reports_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"src":"a"}\n', encoding="utf-8")
        with pytest.raises(ValueError, match=":1:"):
            load_jsonl(p)

    def test_save_load_roundtrip(self, tmp_path):
        recs = gen_task("REVERSE", 10, (2, 4), 6, seed=6)
        p = tmp_path / "r.jsonl"
        save_jsonl(p, recs)
        assert load_jsonl(p) == recs

    def test_save_extra_fields(self, tmp_path):
        p = tmp_path / "e.jsonl"
        save_jsonl(p, [PairRecord("a", "b")], extra=[{"cands": ["b", "c"]}])
        obj = json.loads(p.read_text().strip())
        assert obj["cands"] == ["b", "c"]


class TestSplit:
    def test_all_train(self):
        recs = gen_task("COPY", 10, (2, 3), 4, seed=7)
        train, valid, test = split(recs, (1.0, 0.0, 0.0), seed=0)
        assert len(train) == 10 and not valid and not test

    def test_same_seed_same_split(self):
        recs = gen_task("COPY", 30, (2, 3), 4, seed=8)
        a = split(recs, (0.8, 0.1, 0.1), seed=5)
        b = split(recs, (0.8, 0.1, 0.1), seed=5)
        assert a == b

    def test_multiset_preserved_no_duplication(self):
        recs = gen_task("REVERSE", 37, (2, 4), 6, seed=9)
        train, valid, test = split(recs, (0.6, 0.2, 0.2), seed=1)
        combined = sorted((r.src, r.trg) for r in train + valid + test)
        assert combined == sorted((r.src, r.trg) for r in recs)
        assert len(train) + len(valid) + len(test) == len(recs)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split([], (0.5, 0.2, 0.2), seed=0)
