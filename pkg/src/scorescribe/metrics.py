"""Transcription quality metrics.

Two rates, matching the evaluation convention of end-to-end staff
transcription work:

* symbol error rate (SER): edit operations (insertions, deletions,
  substitutions) needed to turn the prediction into the reference,
  normalized by reference length;
* sequence error rate (ER): fraction of sequences with at least one error.

SER is reported in two flavors: micro (ratio of summed edits to summed
reference lengths, the primary number) and macro (mean of per-sequence
ratios).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs, over arbitrary token sequences."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _check_pairs(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ValueError("metrics: need at least one (reference, prediction) pair")
    return pairs


def compute_ser(pairs) -> float:
    """Micro symbol error rate in percent: 100 * sum(edits) / sum(ref lengths)."""
    pairs = _check_pairs(pairs)
    total_edits = 0
    total_len = 0
    for ref, pred in pairs:
        ref = list(ref)
        if not ref:
            raise ValueError("metrics: zero-length reference sequence")
        total_edits += edit_distance(ref, pred)
        total_len += len(ref)
    return 100.0 * total_edits / total_len


def compute_ser_macro(pairs) -> float:
    """Macro symbol error rate in percent: mean of per-pair normalized edits."""
    pairs = _check_pairs(pairs)
    ratios = []
    for ref, pred in pairs:
        ref = list(ref)
        if not ref:
            raise ValueError("metrics: zero-length reference sequence")
        ratios.append(edit_distance(ref, pred) / len(ref))
    return 100.0 * sum(ratios) / len(ratios)


def compute_er(pairs) -> float:
    """Sequence error rate in percent: share of pairs with any edit."""
    pairs = _check_pairs(pairs)
    wrong = sum(1 for ref, pred in pairs if edit_distance(ref, pred) > 0)
    return 100.0 * wrong / len(pairs)


def format_cell(ser: float, er: float) -> str:
    """Render the combined "SER/ER" cell, e.g. 0.59/16.2."""
    return f"{ser:.2f}/{er:.1f}"


@dataclass
class SampleScore:
    id: str
    edit_ops: int
    ref_len: int

    @property
    def exact(self) -> bool:
        return self.edit_ops == 0


@dataclass
class EvalReport:
    """Aggregate rates plus per-sample scoring records and condition tags."""

    ser: float
    ser_macro: float
    er: float
    records: list[SampleScore]
    tags: dict = field(default_factory=dict)

    @property
    def cell(self) -> str:
        return format_cell(self.ser, self.er)

    def to_dict(self) -> dict:
        return {
            "ser": self.ser,
            "ser_macro": self.ser_macro,
            "er": self.er,
            "cell": self.cell,
            "tags": dict(self.tags),
            "records": [
                {"id": r.id, "edit_ops": r.edit_ops, "ref_len": r.ref_len, "exact": r.exact}
                for r in self.records
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        width = max([len(r.id) for r in self.records] + [6])
        for key in sorted(self.tags):
            lines.append(f"{key}: {self.tags[key]}")
        lines.append(f"samples: {len(self.records)}")
        lines.append(f"SER/ER: {self.cell}")
        lines.append(f"SER micro: {self.ser:.4f}%  SER macro: {self.ser_macro:.4f}%  ER: {self.er:.4f}%")
        lines.append("")
        lines.append(f"{'sample':<{width}}  {'edits':>5}  {'ref':>4}  exact")
        for r in self.records:
            lines.append(f"{r.id:<{width}}  {r.edit_ops:>5}  {r.ref_len:>4}  {'yes' if r.exact else 'no'}")
        return "\n".join(lines) + "\n"


def evaluate_pairs(scored, tags=None) -> EvalReport:
    """Build an EvalReport from (id, reference, prediction) triples."""
    scored = list(scored)
    if not scored:
        raise ValueError("metrics: nothing to evaluate")
    records = []
    for sample_id, ref, pred in scored:
        ref = list(ref)
        if not ref:
            raise ValueError(f"metrics: zero-length reference for sample {sample_id!r}")
        records.append(SampleScore(id=str(sample_id), edit_ops=edit_distance(ref, pred), ref_len=len(ref)))
    total_edits = sum(r.edit_ops for r in records)
    total_len = sum(r.ref_len for r in records)
    ser = 100.0 * total_edits / total_len
    ser_macro = 100.0 * sum(r.edit_ops / r.ref_len for r in records) / len(records)
    er = 100.0 * sum(1 for r in records if not r.exact) / len(records)
    return EvalReport(ser=ser, ser_macro=ser_macro, er=er, records=records, tags=dict(tags or {}))
