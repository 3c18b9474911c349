"""Edit distance, CER/WER, relative improvement and evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def _units(text, unit: str):
    if unit == "character":
        return list(text)
    if unit == "word":
        return text.split()
    raise ValueError(f"unknown unit {unit!r}")


def error_rate(references, hypotheses, unit: str = "character") -> float:
    """Corpus error rate in percent: total edits over total reference length."""
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in count")
    edits = total = 0
    for ref, hyp in zip(references, hypotheses):
        r, h = _units(ref, unit), _units(hyp, unit)
        edits += edit_distance(r, h)
        total += len(r)
    if total == 0:
        raise ValueError("references are empty")
    return 100.0 * edits / total


def relative_improvement(baseline: float, system: float) -> float:
    """(baseline - system) / baseline in percent, rounded half-up to one decimal."""
    if baseline <= 0:
        raise ValueError("baseline error rate must be positive")
    value = Decimal(repr((baseline - system) / baseline * 100.0))
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    references: list
    hypotheses: list
    cer: float = 0.0
    wer: float = 0.0
    relative: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, references, hypotheses, meta=None) -> "EvalReport":
        return cls(list(references), list(hypotheses),
                   error_rate(references, hypotheses, "character"),
                   error_rate(references, hypotheses, "word"), {}, dict(meta or {}))

    def compare(self, name: str, baseline: "EvalReport"):
        self.relative[name] = relative_improvement(baseline.wer, self.wer)

    def to_text(self) -> str:
        lines = ["# eval-report v1"]
        for key in sorted(self.meta):
            lines.append(f"# {key}: {self.meta[key]}")
        for i, (r, h) in enumerate(zip(self.references, self.hypotheses)):
            lines += [f"utt {i}", f"REF: {r}", f"HYP: {h}"]
        lines.append("[summary]")
        lines.append(f"utterances {len(self.references)}")
        lines.append(f"CER {self.cer:.4f}")
        lines.append(f"WER {self.wer:.4f}")
        for name in sorted(self.relative):
            lines.append(f"WER_DELTA {name} {self.relative[name]:.1f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EvalReport":
        refs, hyps, meta, rel = [], [], {}, {}
        cer = wer = 0.0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("REF: "):
                refs.append(line[5:])
            elif line.startswith("HYP: "):
                hyps.append(line[5:])
            elif line.startswith("# ") and ": " in line:
                k, v = line[2:].split(": ", 1)
                meta[k] = v
            elif line.startswith("CER "):
                cer = float(line.split()[1])
            elif line.startswith("WER "):
                wer = float(line.split()[1])
            elif line.startswith("WER_DELTA "):
                _, name, val = line.split()
                rel[name] = float(val)
        return cls(refs, hyps, cer, wer, rel, meta)
