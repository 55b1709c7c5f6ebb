"""Vocabulary, tokenization, unknown-character handling, and TSV ingestion.

Tokens are Unicode scalar values (``str`` iteration order), not bytes and
not grapheme clusters; combining marks therefore count as their own
tokens. Case is preserved verbatim. Reserved tokens occupy the lowest
ids in a fixed order: pad, start, end, separator, plain unknown, then
the indexed unknowns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

PAD = "<pad>"
BOS = "<bos>"  # rendered "$" in figures/docs
EOS = "<eos>"  # rendered "#"
SEP = "<sep>"
UNK = "<unk>"

# Reserved tokens sit at fixed ids in every vocabulary.
PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = range(5)


def indexed_unk(k: int) -> str:
    return f"<unk:{k}>"


def reserved_tokens(n_indexed_unks: int) -> list:
    return [PAD, BOS, EOS, SEP, UNK] + [indexed_unk(k + 1) for k in range(n_indexed_unks)]


@dataclass(frozen=True)
class UnkPolicy:
    """How out-of-vocabulary characters are treated.

    ``simple`` replaces each unknown lemma character with the plain
    unknown token. ``indexed`` assigns numbered unknown tokens to the
    distinct rare/unknown lemma characters (first-occurrence order) and
    mirrors the replacement in the target form, so the model can learn
    to copy rare characters into place. ``freq_threshold`` is the count
    below which a character is considered rare when building the
    vocabulary in indexed mode.
    """

    mode: str = "simple"
    freq_threshold: int = 100

    def __post_init__(self):
        if self.mode not in ("simple", "indexed"):
            raise ValueError(f"unknown unk mode {self.mode!r}")
        if self.freq_threshold < 1:
            raise ValueError("freq_threshold must be >= 1")


class Vocabulary:
    """Immutable token <-> id bijection with a reserved prefix."""

    def __init__(self, tokens: Sequence[str], n_indexed_unks: int = 4):
        expected = reserved_tokens(n_indexed_unks)
        if list(tokens[: len(expected)]) != expected:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.n_indexed_unks = n_indexed_unks
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str):
        return token in self.index

    def lookup(self, token: str) -> int:
        return self.index[token]

    def lookup_or_unk(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def bos_id(self):
        return self.index[BOS]

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def sep_id(self):
        return self.index[SEP]

    @property
    def unk_id(self):
        return self.index[UNK]

    def indexed_unk_ids(self) -> list:
        return [self.index[indexed_unk(k + 1)] for k in range(self.n_indexed_unks)]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "n_indexed_unks": self.n_indexed_unks}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["n_indexed_unks"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)


@dataclass(frozen=True)
class InflectionRow:
    """One raw TSV record."""

    lemma: str
    tags: str
    form: str


@dataclass(frozen=True)
class Example:
    """One encoded supervised instance."""

    lemma_tokens: tuple
    tag_tokens: tuple
    form_tokens: tuple
    raw_lemma: str
    raw_form: str
    raw_tags: str = ""
    unk_map: dict = field(default_factory=dict, compare=False)

    def source_tokens(self) -> tuple:
        return self.lemma_tokens + (SEP_ID,) + self.tag_tokens

    def __post_init__(self):
        if len(self.form_tokens) < 1:
            raise ValueError("form must contain at least one token")


def split_tags(tags: str, layered: bool) -> list:
    """Split a tag string by semicolon; in layered mode each parenthesis
    additionally becomes a standalone token."""
    out = []
    for fld in tags.split(";"):
        if not layered:
            if fld:
                out.append(fld)
            continue
        run = ""
        for ch in fld:
            if ch in "()":
                if run:
                    out.append(run)
                    run = ""
                out.append(ch)
            else:
                run += ch
        if run:
            out.append(run)
    return out


def tokenize_source(lemma: str, tags: str, layered: bool = False) -> list:
    """Lemma characters, then the separator, then tag tokens."""
    if not lemma:
        raise ValueError("lemma must be non-empty")
    return list(lemma) + [SEP] + split_tags(tags, layered)


def load_tsv(path, column_order=("lemma", "tags", "form")) -> list:
    """Read a three-column TSV (UTF-8, LF or CRLF, no header).

    ``column_order`` names the file's column layout and must be a
    permutation of lemma/tags/form; rows come back in file order.
    """
    order = tuple(column_order)
    if sorted(order) != ["form", "lemma", "tags"]:
        raise ValueError(
            f"column_order must be a permutation of (lemma, tags, form), got {order}"
        )
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 fields, got {len(fields)}")
            named = dict(zip(order, fields))
            rows.append(InflectionRow(named["lemma"], named["tags"], named["form"]))
    return rows


def build_vocab(rows: Iterable[InflectionRow], policy: UnkPolicy = UnkPolicy(),
                layered: bool = False, n_indexed_unks: int = 4) -> Vocabulary:
    """Collect all tokens from lemmas, tags, and forms.

    Order is deterministic: reserved tokens first, then first-seen order.
    In indexed mode, characters occurring fewer than ``freq_threshold``
    times are left out of the vocabulary entirely (they will be replaced
    by indexed unknowns); tag tokens are never frequency-filtered.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    char_counts = {}
    seen = []
    seen_set = set()

    def note(token):
        if token not in seen_set:
            seen_set.add(token)
            seen.append(token)

    tag_tokens = set()
    for row in rows:
        for ch in row.lemma:
            char_counts[ch] = char_counts.get(ch, 0) + 1
            note(ch)
        for tok in split_tags(row.tags, layered):
            tag_tokens.add(tok)
            note(tok)
        for ch in row.form:
            char_counts[ch] = char_counts.get(ch, 0) + 1
            note(ch)

    kept = []
    for tok in seen:
        if (
            policy.mode == "indexed"
            and tok not in tag_tokens
            and char_counts.get(tok, 0) < policy.freq_threshold
        ):
            continue
        kept.append(tok)
    base = reserved_tokens(n_indexed_unks)
    kept = [t for t in kept if t not in set(base)]
    return Vocabulary(base + kept, n_indexed_unks)


def apply_unk_policy(row: InflectionRow, vocab: Vocabulary, policy: UnkPolicy,
                     layered: bool = False) -> tuple:
    """Encode one row into an Example, substituting unknown characters.

    Returns ``(example, mapping)`` where mapping sends each indexed
    unknown token string back to the character it stands for. In simple
    mode every out-of-vocabulary lemma character becomes the plain
    unknown token and the mapping is empty. In indexed mode the k-th
    distinct unknown lemma character becomes the k-th indexed unknown,
    and matching characters in the form are replaced identically; an
    example with more distinct unknowns than there are indexed tokens is
    rejected.
    """
    mapping = {}
    char_to_unk = {}

    def encode_lemma_char(ch: str) -> int:
        if ch in vocab:
            return vocab.lookup(ch)
        if policy.mode == "simple":
            return vocab.unk_id
        if ch not in char_to_unk:
            k = len(char_to_unk) + 1
            if k > vocab.n_indexed_unks:
                raise ValueError(
                    f"lemma {row.lemma!r} has more than {vocab.n_indexed_unks} "
                    "distinct unknown characters"
                )
            char_to_unk[ch] = indexed_unk(k)
            mapping[indexed_unk(k)] = ch
        return vocab.lookup(char_to_unk[ch])

    def encode_form_char(ch: str) -> int:
        if policy.mode == "indexed" and ch in char_to_unk:
            return vocab.lookup(char_to_unk[ch])
        if ch in vocab:
            return vocab.lookup(ch)
        return vocab.unk_id

    lemma_ids = tuple(encode_lemma_char(c) for c in row.lemma)
    tag_ids = tuple(vocab.lookup_or_unk(t) for t in split_tags(row.tags, layered))
    form_ids = tuple(encode_form_char(c) for c in row.form)
    example = Example(
        lemma_tokens=lemma_ids,
        tag_tokens=tag_ids,
        form_tokens=form_ids,
        raw_lemma=row.lemma,
        raw_form=row.form,
        raw_tags=row.tags,
        unk_map=dict(mapping),
    )
    return example, mapping


def resolve_unk_in_output(tokens: Sequence[int], vocab: Vocabulary, lemma: str,
                          mapping: Optional[dict] = None) -> str:
    """Turn predicted token ids back into a surface string.

    Indexed unknowns are inverted through ``mapping``; a plain unknown
    becomes the leftmost lemma character that is itself unknown to the
    vocabulary, or is dropped when no such character exists. Structural
    reserved tokens are skipped.
    """
    mapping = mapping or {}
    structural = {vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.sep_id}
    indexed_ids = set(vocab.indexed_unk_ids())
    leftmost_unknown = next((c for c in lemma if c not in vocab), None)
    out = []
    for tok in tokens:
        if tok in structural:
            continue
        name = vocab.token_of(tok)
        if tok == vocab.unk_id:
            if leftmost_unknown is not None:
                out.append(leftmost_unknown)
            continue
        if tok in indexed_ids:
            ch = mapping.get(name)
            if ch is not None:
                out.append(ch)
            continue
        out.append(name)
    return "".join(out)


def encode_corpus(rows: Iterable[InflectionRow], vocab: Vocabulary, policy: UnkPolicy,
                  layered: bool = False) -> list:
    """Apply the unknown policy to every row; returns Examples."""
    return [apply_unk_policy(r, vocab, policy, layered)[0] for r in rows]
