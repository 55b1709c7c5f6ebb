"""Tokenization, vocabulary construction, unknown handling, TSV parsing."""

import numpy as np
import pytest

from bidiseq.vocab import (
    BOS,
    EOS,
    PAD,
    SEP,
    UNK,
    InflectionRow,
    UnkPolicy,
    Vocabulary,
    apply_unk_policy,
    build_vocab,
    indexed_unk,
    load_tsv,
    resolve_unk_in_output,
    reserved_tokens,
    tokenize_source,
)


class TestTokenizeSource:
    def test_split_by_char_and_semicolon(self):
        assert tokenize_source("walk", "V;PST") == ["w", "a", "l", "k", SEP, "V", "PST"]

    def test_empty_tags(self):
        assert tokenize_source("a", "") == ["a", SEP]

    def test_layered_parentheses(self):
        assert tokenize_source("go", "V;PST(IPFV)", layered=True) == [
            "g", "o", SEP, "V", "PST", "(", "IPFV", ")",
        ]

    def test_unlayered_keeps_parens_inside_tag(self):
        assert tokenize_source("go", "PST(IPFV)") == ["g", "o", SEP, "PST(IPFV)"]

    def test_empty_lemma_rejected(self):
        with pytest.raises(ValueError):
            tokenize_source("", "V")

    def test_lemma_roundtrip_any_unicode(self):
        rng = np.random.default_rng(0)
        pool = "abß∆é漢🎈́x;()"
        for _ in range(50):
            lemma = "".join(rng.choice(list(pool), size=rng.integers(1, 9)))
            toks = tokenize_source(lemma, "T1;T2")
            cut = toks.index(SEP)
            assert "".join(toks[:cut]) == lemma


class TestBuildVocab:
    def test_union_of_observed_plus_reserved(self):
        rows = [InflectionRow("ab", "T", "abx")]
        v = build_vocab(rows)
        for tok in ["a", "b", "x", "T"]:
            assert tok in v
        assert v.tokens[: len(reserved_tokens(4))] == reserved_tokens(4)

    def test_deterministic_serialization(self):
        rows = [InflectionRow("ab", "T;U", "abx"), InflectionRow("ba", "U", "bay")]
        assert build_vocab(rows).to_json() == build_vocab(list(rows)).to_json()

    def test_repeated_char_once(self):
        v = build_vocab([InflectionRow("aaa", "T", "aaa")])
        assert v.tokens.count("a") == 1

    def test_empty_corpus_error(self):
        with pytest.raises(ValueError, match="empty"):
            build_vocab([])

    def test_indexed_mode_drops_rare_chars(self):
        rows = [InflectionRow("ab", "T", "abq")] + [
            InflectionRow("ab", "T", "ab") for _ in range(5)
        ]
        v = build_vocab(rows, UnkPolicy("indexed", freq_threshold=3))
        assert "a" in v and "b" in v
        assert "q" not in v
        assert "T" in v  # tags are never frequency-filtered

    def test_bijection(self):
        v = build_vocab([InflectionRow("abc", "T1;T2", "abcd")])
        for i in range(len(v)):
            assert v.lookup(v.token_of(i)) == i


class TestApplyUnkPolicy:
    def _vocab(self):
        return build_vocab([InflectionRow("walk", "V;PST", "walked")])

    def test_simple_substitution(self):
        ex, mapping = apply_unk_policy(
            InflectionRow("wålk", "V", "wålked"), self._vocab(), UnkPolicy("simple")
        )
        toks = [self._vocab().token_of(t) for t in ex.lemma_tokens]
        assert toks == ["w", UNK, "l", "k"]
        assert mapping == {}

    def test_indexed_assignment_and_form_mirroring(self):
        rows = [InflectionRow("walk", "V", "walks")]
        vocab = build_vocab(rows)
        ex, mapping = apply_unk_policy(
            InflectionRow("αβα", "V", "αβαs"), vocab, UnkPolicy("indexed", 100)
        )
        lem = [vocab.token_of(t) for t in ex.lemma_tokens]
        frm = [vocab.token_of(t) for t in ex.form_tokens]
        assert lem == [indexed_unk(1), indexed_unk(2), indexed_unk(1)]
        assert frm == [indexed_unk(1), indexed_unk(2), indexed_unk(1), "s"]
        assert mapping == {indexed_unk(1): "α", indexed_unk(2): "β"}

    def test_fully_known_is_identity(self):
        vocab = self._vocab()
        ex, mapping = apply_unk_policy(
            InflectionRow("walk", "V;PST", "walked"), vocab, UnkPolicy("simple")
        )
        assert mapping == {}
        assert [vocab.token_of(t) for t in ex.lemma_tokens] == ["w", "a", "l", "k"]
        assert [vocab.token_of(t) for t in ex.form_tokens] == list("walked")

    def test_too_many_distinct_unknowns(self):
        vocab = self._vocab()
        with pytest.raises(ValueError, match="αβγδε"):
            apply_unk_policy(
                InflectionRow("αβγδε", "V", "x"), vocab, UnkPolicy("indexed", 100)
            )

    def test_unknown_tag_maps_to_unk(self):
        vocab = self._vocab()
        ex, _ = apply_unk_policy(
            InflectionRow("walk", "FUT", "walked"), vocab, UnkPolicy("simple")
        )
        assert ex.tag_tokens == (vocab.unk_id,)


class TestResolveUnk:
    def _vocab(self):
        return build_vocab([InflectionRow("walk", "V", "walks")])

    def test_plain_unk_takes_leftmost_unknown(self):
        vocab = self._vocab()
        toks = [vocab.lookup("w"), vocab.unk_id, vocab.lookup("l"), vocab.lookup("k")]
        assert resolve_unk_in_output(toks, vocab, "wålk") == "wålk"

    def test_plain_unk_dropped_without_unknowns(self):
        vocab = self._vocab()
        toks = [vocab.lookup("w"), vocab.unk_id]
        assert resolve_unk_in_output(toks, vocab, "walk") == "w"

    def test_indexed_inversion(self):
        vocab = self._vocab()
        toks = [vocab.lookup(indexed_unk(1)), vocab.lookup("s")]
        out = resolve_unk_in_output(toks, vocab, "α", {indexed_unk(1): "α"})
        assert out == "αs"

    def test_roundtrip_through_policy(self):
        vocab = self._vocab()
        row = InflectionRow("αβα", "V", "αβαs")
        ex, mapping = apply_unk_policy(row, vocab, UnkPolicy("indexed", 100))
        assert resolve_unk_in_output(ex.form_tokens, vocab, row.lemma, mapping) == row.form


class TestLoadTsv:
    def test_default_order(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("walk\tV;PST\twalked\n", encoding="utf-8")
        rows = load_tsv(p)
        assert rows == [InflectionRow("walk", "V;PST", "walked")]

    def test_permuted_order(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("walk\twalked\tV;PST\n", encoding="utf-8")
        rows = load_tsv(p, column_order=("lemma", "form", "tags"))
        assert rows == [InflectionRow("walk", "V;PST", "walked")]

    def test_field_count_error_names_line(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("walk\tV;PST\twalked\nbad\tline\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 2: expected 3 fields"):
            load_tsv(p)

    def test_unknown_column_rejected(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("a\tb\tc\n", encoding="utf-8")
        with pytest.raises(ValueError, match="permutation"):
            load_tsv(p, column_order=("lemma", "tags", "pos"))

    def test_crlf_and_blank_lines(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_bytes(b"walk\tV\twalked\r\n\r\ngo\tV\twent\n")
        rows = load_tsv(p)
        assert [r.lemma for r in rows] == ["walk", "go"]


class TestVocabularyInvariants:
    def test_requires_reserved_prefix(self):
        with pytest.raises(ValueError, match="reserved"):
            Vocabulary(["a", "b"])

    def test_reserved_order(self):
        assert reserved_tokens(2) == [PAD, BOS, EOS, SEP, UNK, indexed_unk(1), indexed_unk(2)]

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            Vocabulary(reserved_tokens(4) + ["a", "a"])
