"""Corpora of (POS-tag sequence, QDMR operator sequence) pairs.

The trainable corpus format is JSONL, one object per line::

    {"id": "...", "pos": ["VERB", "NOUN"], "ops": ["select", "filter"], "question": "..."}

BREAK's CSV release (question_id, question_text, decomposition, operators)
can be converted to that format with :func:`read_break_csv` plus a
:class:`LexiconTagger`.
"""

from __future__ import annotations

import ast
import csv
import io
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
RESERVED = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

OPERATORS = (
    "select",
    "filter",
    "project",
    "aggregate",
    "group",
    "superlative",
    "comparative",
    "union",
    "intersection",
    "discard",
    "sort",
    "boolean",
    "arithmetic",
)

UNIVERSAL_POS = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


def operator_set(names: Sequence[str] | None = None) -> tuple[str, ...]:
    """Return the operator inventory, checking an override for duplicates."""
    if names is None:
        return OPERATORS
    cleaned = tuple(n.strip().lower() for n in names)
    dupes = [n for n, c in Counter(cleaned).items() if c > 1]
    if dupes:
        raise ValidationError(f"duplicate operators in override: {dupes}")
    return cleaned


class Vocab:
    """Bijective symbol <-> id map; ids 0..3 are PAD, SOS, EOS, UNK."""

    def __init__(self, symbols: Iterable[str] = ()):
        self._itos: list[str] = list(RESERVED)
        self._stoi: dict[str, int] = {s: i for i, s in enumerate(RESERVED)}
        for s in symbols:
            self.add(s)
        self.unk_count = 0

    def add(self, symbol: str) -> int:
        if symbol not in self._stoi:
            self._stoi[symbol] = len(self._itos)
            self._itos.append(symbol)
        return self._stoi[symbol]

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._itos == other._itos

    def __repr__(self) -> str:
        return f"Vocab({self._itos!r})"

    @property
    def symbols(self) -> list[str]:
        return list(self._itos)

    def id(self, symbol: str) -> int:
        idx = self._stoi.get(symbol)
        if idx is None:
            self.unk_count += 1
            return UNK_ID
        return idx

    def symbol(self, idx: int) -> str:
        return self._itos[idx]

    def encode(self, symbols: Sequence[str]) -> list[int]:
        return [self.id(s) for s in symbols]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    def content_symbols(self) -> list[str]:
        return self._itos[len(RESERVED) :]

    @classmethod
    def from_symbols(cls, symbols: Sequence[str]) -> "Vocab":
        """Rebuild from a full symbol list (reserved entries included)."""
        if tuple(symbols[: len(RESERVED)]) != RESERVED:
            raise ValidationError("vocabulary must start with the reserved symbols")
        return cls(symbols[len(RESERVED) :])


@dataclass(frozen=True)
class Example:
    id: str
    pos: tuple[str, ...]
    ops: tuple[str, ...]
    question: str | None = None

    def __post_init__(self):
        if not self.pos:
            raise ValidationError(f"example {self.id}: empty POS sequence")
        if not self.ops:
            raise ValidationError(f"example {self.id}: empty operator sequence")

    def to_json(self) -> dict:
        out = {"id": self.id, "pos": list(self.pos), "ops": list(self.ops)}
        if self.question is not None:
            out["question"] = self.question
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Example":
        return cls(str(obj["id"]), tuple(obj["pos"]), tuple(obj["ops"]), obj.get("question"))


def build_vocab(corpus: Iterable[Example], side: str, strict: bool = False,
                operators: Sequence[str] | None = None) -> Vocab:
    """Collect symbols from one side of the corpus in first-occurrence order.

    In strict mode the operator side is the fixed operator inventory and any
    symbol outside it is rejected.
    """
    if side not in ("pos", "ops"):
        raise ValueError(f"side must be 'pos' or 'ops', not {side!r}")
    items = list(corpus)
    if not items:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    if strict and side == "ops":
        allowed = operator_set(operators)
        for ex in items:
            bad = [o for o in ex.ops if o not in allowed]
            if bad:
                raise ValidationError(f"row {ex.id}: unknown operators {bad}")
        return Vocab(allowed)
    vocab = Vocab()
    for ex in items:
        for s in getattr(ex, side):
            vocab.add(s)
    return vocab


# ---------------------------------------------------------------- BREAK CSV

_TOKEN_RE = re.compile(r"\w+(?:'\w+)?|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Whitespace + punctuation split, lowercased."""
    return _TOKEN_RE.findall(text.lower())


def parse_operator_list(text: str, row_id: str = "?") -> list[str]:
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise ParseError(f"row {row_id}: operators column is not a bracketed list: {text!r}")
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise ParseError(f"row {row_id}: malformed operator list {text!r}") from exc
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParseError(f"row {row_id}: operator list must hold strings")
    return [v.strip().strip("'\"").strip().lower() for v in value]


def parse_break_row(row: dict, strict: bool = True, operators: Sequence[str] | None = None) -> dict:
    """Extract id, question, steps and operator labels from one BREAK record.

    POS tags are not filled in here; see :func:`convert_break_rows`.
    """
    row_id = row.get("question_id") or "?"
    ops = parse_operator_list(row.get("operators", ""), row_id)
    if not ops:
        raise ValidationError(f"row {row_id}: empty operator list")
    if strict:
        allowed = operator_set(operators)
        bad = [o for o in ops if o not in allowed]
        if bad:
            raise ValidationError(f"row {row_id}: operators outside the inventory: {bad}")
    steps = [s.strip() for s in (row.get("decomposition") or "").split(";") if s.strip()]
    return {"id": row_id, "question": row.get("question_text", ""), "steps": steps, "ops": ops}


@dataclass
class ConversionStats:
    rows: int = 0
    converted: int = 0
    skipped: list[tuple[int, str]] = field(default_factory=list)
    tokens: int = 0
    unknown_tokens: int = 0
    op_histogram: Counter = field(default_factory=Counter)

    @property
    def unk_rate(self) -> float:
        return self.unknown_tokens / self.tokens if self.tokens else 0.0

    def summary(self) -> dict:
        return {
            "rows": self.rows,
            "converted": self.converted,
            "skipped": len(self.skipped),
            "unk_tag_rate": round(self.unk_rate, 6),
            "operator_histogram": dict(sorted(self.op_histogram.items())),
            "total_steps": sum(self.op_histogram.values()),
        }


def convert_break_rows(lines: Iterable[str], tagger: "LexiconTagger", strict: bool = True
                       ) -> tuple[list[Example], ConversionStats, list[dict]]:
    """Parse BREAK CSV text into tagged examples, skipping bad rows.

    Returns examples, statistics and the parsed records (with their
    decomposition steps) for callers that need the step text.
    """
    stats = ConversionStats()
    examples: list[Example] = []
    records: list[dict] = []
    reader = csv.DictReader(lines)
    for row in reader:
        stats.rows += 1
        line_no = reader.line_num
        try:
            rec = parse_break_row(row, strict=strict)
        except (ParseError, ValidationError) as exc:
            stats.skipped.append((line_no, str(exc)))
            continue
        tokens = tokenize(rec["question"])
        if not tokens:
            stats.skipped.append((line_no, f"row {rec['id']}: empty question"))
            continue
        tags = tag_pos(tokens, tagger)
        stats.tokens += len(tokens)
        stats.unknown_tokens += sum(1 for t in tokens if t not in tagger.lexicon)
        stats.op_histogram.update(rec["ops"])
        stats.converted += 1
        examples.append(Example(rec["id"], tuple(tags), tuple(rec["ops"]), rec["question"]))
        records.append(rec)
    return examples, stats, records


def read_break_csv(path: str | Path, tagger: "LexiconTagger", strict: bool = True):
    with open(path, newline="", encoding="utf-8") as fh:
        return convert_break_rows(fh, tagger, strict)


def sample_break_csv() -> str:
    """Text of the bundled 50-row BREAK-format sample."""
    return resources.files("qops.resources").joinpath("break_sample.csv").read_text(encoding="utf-8")


# ---------------------------------------------------------------- tagging


@dataclass(frozen=True)
class LexiconTagger:
    lexicon: dict[str, str]
    default: str = "NOUN"

    def tag(self, token: str) -> str:
        return self.lexicon.get(token.lower(), self.default)

    @classmethod
    def load(cls, path: str | Path, default: str = "NOUN") -> "LexiconTagger":
        with open(path, encoding="utf-8") as fh:
            return cls(parse_lexicon(fh), default)

    @classmethod
    def bundled(cls) -> "LexiconTagger":
        text = resources.files("qops.resources").joinpath("lexicon.tsv").read_text(encoding="utf-8")
        return cls(parse_lexicon(io.StringIO(text)))


def parse_lexicon(lines: Iterable[str]) -> dict[str, str]:
    lex: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"lexicon line {n}: expected 'word<TAB>TAG', got {line!r}")
        lex[parts[0].lower()] = parts[1].strip()
    return lex


def write_lexicon(lexicon: dict[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, tag in lexicon.items():
            fh.write(f"{word}\t{tag}\n")


def tag_pos(tokens: Sequence[str], tagger: LexiconTagger) -> list[str]:
    if not tokens:
        raise ValueError("tag_pos needs at least one token")
    return [tagger.tag(t) for t in tokens]


# ---------------------------------------------------------------- JSONL


def read_jsonl(path: str | Path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Example.from_json(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ParseError(f"{path}:{n}: {exc}") from exc
    return out


def write_jsonl(examples: Iterable[Example], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    examples: list[Example]
    pos_ids: np.ndarray  # B x Tx, PAD-filled
    pos_mask: np.ndarray  # B x Tx bool
    dec_in: np.ndarray  # B x Ty: SOS + ops, PAD-filled
    dec_out: np.ndarray  # B x Ty: ops + EOS, PAD-filled
    tgt_mask: np.ndarray  # B x Ty bool

    def __len__(self) -> int:
        return len(self.examples)

    def row(self, b: int) -> tuple[list[int], list[int], list[int]]:
        """Unpadded (pos ids, decoder inputs, decoder targets) of example ``b``."""
        n_x = int(self.pos_mask[b].sum())
        n_y = int(self.tgt_mask[b].sum())
        return (self.pos_ids[b, :n_x].tolist(), self.dec_in[b, :n_y].tolist(),
                self.dec_out[b, :n_y].tolist())


def make_batch(examples: Sequence[Example], pos_vocab: Vocab, op_vocab: Vocab) -> Batch:
    B = len(examples)
    tx = max(len(e.pos) for e in examples)
    ty = max(len(e.ops) for e in examples) + 1
    pos_ids = np.full((B, tx), PAD_ID, dtype=np.int64)
    pos_mask = np.zeros((B, tx), dtype=bool)
    dec_in = np.full((B, ty), PAD_ID, dtype=np.int64)
    dec_out = np.full((B, ty), PAD_ID, dtype=np.int64)
    tgt_mask = np.zeros((B, ty), dtype=bool)
    for b, ex in enumerate(examples):
        p = pos_vocab.encode(ex.pos)
        o = op_vocab.encode(ex.ops)
        pos_ids[b, : len(p)] = p
        pos_mask[b, : len(p)] = True
        dec_in[b, : len(o) + 1] = [SOS_ID] + o
        dec_out[b, : len(o) + 1] = o + [EOS_ID]
        tgt_mask[b, : len(o) + 1] = True
    return Batch(list(examples), pos_ids, pos_mask, dec_in, dec_out, tgt_mask)


def batchify(corpus: Sequence[Example], batch_size: int, seed: int, *,
             pos_vocab: Vocab, op_vocab: Vocab, shuffle: bool = True) -> list[Batch]:
    """Shuffle under ``seed`` and cut into padded batches; the last may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(corpus))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    return [
        make_batch([corpus[i] for i in order[k : k + batch_size]], pos_vocab, op_vocab)
        for k in range(0, len(order), batch_size)
    ]


# ---------------------------------------------------------------- synthetic corpus

def synthetic_corpus(n: int = 20, seed: int = 0, max_pos: int = 10, max_ops: int = 6) -> list[Example]:
    """Small pre-tagged corpus whose operators follow a fixed rule on the tags.

    Each question starts with a wh-word or verb, then a run of content
    words. Every content word adds one QDMR step: the first noun selects,
    later nouns filter, an adjective in superlative position ranks, a
    numeral compares and a trailing "how many" pattern aggregates.
    """
    rng = np.random.default_rng(seed)
    out: list[Example] = []
    while len(out) < n:
        counting = bool(rng.random() < 0.35)
        pos = ["ADV", "ADJ"] if counting else [str(rng.choice(["PRON", "VERB"]))]
        ops = ["select"]
        pos += ["NOUN"]
        n_mods = int(rng.integers(0, max_ops - 1 - int(counting)))
        for _ in range(n_mods):
            kind = str(rng.choice(["ADP-NOUN", "ADJ", "NUM"]))
            if kind == "ADP-NOUN":
                pos += ["ADP", "NOUN"]
                ops.append("filter")
            elif kind == "ADJ":
                pos += ["DET", "ADJ"]
                ops.append("superlative")
            else:
                pos += ["NUM"]
                ops.append("comparative")
        if counting:
            ops.append("aggregate")
        if len(pos) > max_pos or len(ops) > max_ops:
            continue
        out.append(Example(f"syn-{len(out)}", tuple(pos), tuple(ops)))
    return out
