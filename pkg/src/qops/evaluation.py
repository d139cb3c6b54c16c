"""Metrics over predicted vs gold operator sequences, and attention export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from qops.data import OPERATORS

OTHER = "<other>"


class ContractError(ValueError):
    pass


def token_accuracy(pred: Sequence, gold: Sequence) -> float:
    """Fraction of gold positions predicted correctly (EOS not included)."""
    if not gold:
        raise ValueError("gold sequence is empty")
    hits = sum(1 for p, g in zip(pred, gold) if p == g)
    return hits / len(gold)


def exact_match(pred: Sequence, gold: Sequence) -> int:
    return int(list(pred) == list(gold))


@dataclass
class EvalReport:
    operators: list[str]
    n_examples: int = 0
    gold_tokens: int = 0
    correct_tokens: int = 0
    exact: int = 0
    too_short: int = 0
    too_long: int = 0
    extra_tokens: int = 0
    confusion: np.ndarray = field(default=None)  # gold operator x (predicted operator | OTHER)

    def __post_init__(self):
        if self.confusion is None:
            self.confusion = np.zeros((len(self.operators), len(self.operators) + 1), dtype=np.int64)

    @property
    def token_accuracy(self) -> float:
        return self.correct_tokens / self.gold_tokens if self.gold_tokens else 0.0

    @property
    def exact_match(self) -> float:
        return self.exact / self.n_examples if self.n_examples else 0.0

    def add(self, pred: Sequence[str], gold: Sequence[str]) -> None:
        col_of = {op: i for i, op in enumerate(self.operators)}
        other = len(self.operators)
        self.n_examples += 1
        self.gold_tokens += len(gold)
        self.exact += exact_match(pred, gold)
        for i, g in enumerate(gold):
            p = pred[i] if i < len(pred) else None
            if p == g:
                self.correct_tokens += 1
            if g in col_of:
                self.confusion[col_of[g], col_of.get(p, other)] += 1
        if len(pred) < len(gold):
            self.too_short += 1
        elif len(pred) > len(gold):
            self.too_long += 1
            self.extra_tokens += len(pred) - len(gold)

    def precision_recall(self) -> dict[str, dict[str, float]]:
        out = {}
        core = self.confusion[:, : len(self.operators)]
        for i, op in enumerate(self.operators):
            tp = core[i, i]
            col = core[:, i].sum()
            row = self.confusion[i].sum()
            out[op] = {
                "precision": float(tp / col) if col else 0.0,
                "recall": float(tp / row) if row else 0.0,
            }
        return out

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "token_accuracy": self.token_accuracy,
            "exact_match": self.exact_match,
            "gold_tokens": self.gold_tokens,
            "length_errors": {"too_short": self.too_short, "too_long": self.too_long,
                              "extra_tokens": self.extra_tokens},
            "confusion": {"rows": self.operators, "cols": self.operators + [OTHER],
                          "counts": self.confusion.tolist()},
            "per_operator": self.precision_recall(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def evaluate_pairs(pairs: Iterable[tuple[Sequence[str], Sequence[str]]],
                   operators: Sequence[str] = OPERATORS) -> EvalReport:
    """Aggregate (predicted, gold) operator sequences into one report."""
    report = EvalReport(list(operators))
    for pred, gold in pairs:
        report.add(list(pred), list(gold))
    return report


# ---------------------------------------------------------------- attention


def export_attention(trace: np.ndarray, pos_symbols: Sequence[str], op_symbols: Sequence[str],
                     path: str | Path) -> None:
    """Write alpha as CSV: header of POS tags, one row per decoded operator."""
    trace = np.asarray(trace)
    if trace.shape != (len(op_symbols), len(pos_symbols)):
        raise ContractError(
            f"trace shape {trace.shape} does not match {len(op_symbols)} operators x {len(pos_symbols)} tags"
        )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(pos_symbols))
        for op, row in zip(op_symbols, trace):
            w.writerow([op] + [f"{v:.6f}" for v in row])


def read_attention(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    ops = [r[0] for r in body]
    values = np.array([[float(x) for x in r[1:]] for r in body])
    return header[1:], ops, values
