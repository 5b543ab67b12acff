"""Answer-quality metrics and evaluation reports.

Closed questions score by normalized exact match. Open questions score the
generated answer against the gold answer with clipped n-gram precision
(geometric mean with a brevity penalty), n-gram overlap F1, and longest
common subsequence F1. Scoring tokenization lowercases and treats every
punctuation character as a separator; empty candidates score zero rather
than raising, and the report counts them separately.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from . import data as dat
from .errors import ContractViolation
from .strategies import REPORT_LABELS, GenerationOutput, Strategy, generate, two_stage_generate

_SEPARATORS = str.maketrans({c: " " for c in string.punctuation})
_EPS = 1e-9


def metric_tokens(text: str) -> list[str]:
    """Lowercase, split punctuation away, split on whitespace."""
    return text.lower().translate(_SEPARATORS).split()


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(zip(*(tokens[i:] for i in range(n))))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """Geometric mean of clipped 1..max_n gram precisions times a brevity penalty.

    A missing order (candidate too short) counts as 1.0 when the reference is
    also too short and epsilon otherwise; zero precisions floor at epsilon so
    the geometric mean stays defined. An empty candidate scores 0.
    """
    if max_n < 1:
        raise ContractViolation(f"max_n must be at least 1, got {max_n}")
    cand = metric_tokens(candidate)
    ref = metric_tokens(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_total = len(cand) - n + 1
        ref_total = len(ref) - n + 1
        if cand_total <= 0:
            p = 1.0 if ref_total <= 0 else _EPS
        else:
            cand_counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            clipped = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            p = clipped / cand_total
            if p == 0.0:
                p = _EPS
        log_sum += math.log(p)
    brevity = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return brevity * math.exp(log_sum / max_n)


def rouge_n(candidate: str, reference: str, n: int) -> float:
    """Clipped n-gram overlap F1; zero whenever either side has no n-grams."""
    if n < 1:
        raise ContractViolation(f"n must be at least 1, got {n}")
    cand = metric_tokens(candidate)
    ref = metric_tokens(reference)
    cand_total = len(cand) - n + 1
    ref_total = len(ref) - n + 1
    if cand_total <= 0 or ref_total <= 0:
        return 0.0
    ref_counts = _ngram_counts(ref, n)
    overlap = sum(min(c, ref_counts[g]) for g, c in _ngram_counts(cand, n).items())
    if overlap == 0:
        return 0.0
    precision = overlap / cand_total
    recall = overlap / ref_total
    return 2.0 * precision * recall / (precision + recall)


def rouge_l(candidate: str, reference: str) -> float:
    """Longest-common-subsequence F1 over metric tokens."""
    cand = metric_tokens(candidate)
    ref = metric_tokens(reference)
    if not cand or not ref:
        return 0.0
    prev = [0] * (len(ref) + 1)
    for a in cand:
        row = [0]
        for j, b in enumerate(ref, start=1):
            row.append(prev[j - 1] + 1 if a == b else max(row[-1], prev[j]))
        prev = row
    lcs = prev[-1]
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


_UNCATEGORIZED = "uncategorized"


@dataclass
class EvalReport:
    """Aggregate scores for one strategy over one sample list."""

    strategy: str
    total: int
    closed_total: int
    open_total: int
    closed_correct: int
    parse_failures: int
    empty_answers: int
    bleu_means: dict[int, float] = field(default_factory=dict)
    rouge1: float | None = None
    rouge2: float | None = None
    rougeL: float | None = None
    category_errors: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def closed_accuracy(self) -> float | None:
        if self.closed_total == 0:
            return None
        return self.closed_correct / self.closed_total

    @property
    def label(self) -> str:
        return REPORT_LABELS[Strategy(self.strategy)]

    def to_kv(self) -> str:
        """Stable machine-readable key=value lines."""
        lines = [
            f"strategy={self.strategy}",
            f"samples={self.total}",
            f"closed.total={self.closed_total}",
            f"closed.correct={self.closed_correct}",
            f"open.total={self.open_total}",
            f"parse.failures={self.parse_failures}",
            f"empty.answers={self.empty_answers}",
        ]
        if self.closed_accuracy is not None:
            lines.insert(4, f"closed.accuracy={self.closed_accuracy:.6f}")
        for n in sorted(self.bleu_means):
            lines.append(f"open.bleu{n}={self.bleu_means[n]:.6f}")
        for name, value in (("rouge1", self.rouge1), ("rouge2", self.rouge2), ("rougeL", self.rougeL)):
            if value is not None:
                lines.append(f"open.{name}={value:.6f}")
        for category in sorted(self.category_errors):
            errors, count = self.category_errors[category]
            lines.append(f"errors.{category.replace(' ', '_')}={errors}/{count}")
        return "\n".join(lines)

    def to_text(self) -> str:
        """Human-oriented summary block."""
        rows: list[tuple[str, str]] = [
            ("strategy", f"{self.strategy} ({self.label})"),
            ("samples", f"{self.total} (closed {self.closed_total}, open {self.open_total})"),
        ]
        if self.closed_accuracy is not None:
            rows.append(("closed accuracy", f"{self.closed_accuracy:.4f}"))
        for n in sorted(self.bleu_means):
            rows.append((f"open BLEU-{n}", f"{self.bleu_means[n]:.4f}"))
        for name, value in (("ROUGE-1", self.rouge1), ("ROUGE-2", self.rouge2), ("ROUGE-L", self.rougeL)):
            if value is not None:
                rows.append((f"open {name}", f"{value:.4f}"))
        rows.append(("parse failures", str(self.parse_failures)))
        rows.append(("empty answers", str(self.empty_answers)))
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        if self.category_errors:
            lines.append("closed errors by category")
            cat_width = max(len(c) for c in self.category_errors)
            for category in sorted(self.category_errors):
                errors, count = self.category_errors[category]
                lines.append(f"  {category:<{cat_width}}  {errors}/{count}")
        return "\n".join(lines)


def evaluate(
    samples: Sequence[dat.VqaSample],
    outputs: Sequence[GenerationOutput],
    strategy: Strategy | str,
    bleu_orders: Sequence[int] = (1, 2, 3),
) -> EvalReport:
    """Score aligned (sample, output) pairs.

    Closed questions: normalized exact match; a parse failure is wrong by
    definition. Open questions: mean BLEU and ROUGE of the generated answer
    against the gold answer, with failed parses scoring zero. Closed errors
    also bucket by sample category (uncategorized when absent), and the
    buckets always sum to the total number of closed errors.
    """
    strategy = Strategy(strategy)
    if len(samples) != len(outputs):
        raise ContractViolation(f"{len(samples)} samples but {len(outputs)} outputs")
    if not samples:
        raise ContractViolation("evaluate needs at least one sample")
    closed_total = closed_correct = open_total = 0
    parse_failures = empty_answers = 0
    bleu_sums = {n: 0.0 for n in bleu_orders}
    rouge_sums = {"r1": 0.0, "r2": 0.0, "rl": 0.0}
    category_errors: dict[str, list[int]] = {}
    for sample, out in zip(samples, outputs):
        if not out.parse_ok:
            parse_failures += 1
        if not out.answer.strip():
            empty_answers += 1
        if sample.qtype == "closed":
            closed_total += 1
            hit = out.parse_ok and dat.normalize_answer(out.answer) == dat.normalize_answer(sample.answer)
            closed_correct += hit
            bucket = category_errors.setdefault(sample.category or _UNCATEGORIZED, [0, 0])
            bucket[0] += not hit
            bucket[1] += 1
        else:
            open_total += 1
            answer = out.answer if out.parse_ok else ""
            for n in bleu_sums:
                bleu_sums[n] += bleu(answer, sample.answer, max_n=n)
            rouge_sums["r1"] += rouge_n(answer, sample.answer, 1)
            rouge_sums["r2"] += rouge_n(answer, sample.answer, 2)
            rouge_sums["rl"] += rouge_l(answer, sample.answer)
    report = EvalReport(
        strategy=strategy.value,
        total=len(samples),
        closed_total=closed_total,
        open_total=open_total,
        closed_correct=closed_correct,
        parse_failures=parse_failures,
        empty_answers=empty_answers,
        category_errors={k: (v[0], v[1]) for k, v in category_errors.items()},
    )
    if open_total:
        report.bleu_means = {n: s / open_total for n, s in bleu_sums.items()}
        report.rouge1 = rouge_sums["r1"] / open_total
        report.rouge2 = rouge_sums["r2"] / open_total
        report.rougeL = rouge_sums["rl"] / open_total
    return report


def predict_outputs(
    models,
    vocab: dat.Vocab,
    samples: Sequence[dat.VqaSample],
    strategy: Strategy | str,
    max_len: int | None = None,
) -> list[GenerationOutput]:
    """Run generation over samples; two-stage takes a (stage1, stage2) pair."""
    strategy = Strategy(strategy)
    outputs = []
    if strategy is Strategy.TWO_STAGE:
        try:
            stage1, stage2 = models
        except (TypeError, ValueError):
            raise ContractViolation("two-stage prediction needs a (stage1, stage2) model pair") from None
        for sample in samples:
            outputs.append(two_stage_generate(stage1, stage2, vocab, sample.question, sample.grid(), max_len))
    else:
        for sample in samples:
            outputs.append(generate(models, vocab, strategy, sample.question, sample.grid(), max_len))
    return outputs


def evaluate_model(
    models,
    vocab: dat.Vocab,
    samples: Sequence[dat.VqaSample],
    strategy: Strategy | str,
    max_len: int | None = None,
) -> tuple[EvalReport, list[GenerationOutput]]:
    """Generate then score; returns the report plus the raw outputs."""
    outputs = predict_outputs(models, vocab, samples, strategy, max_len)
    return evaluate(samples, outputs, strategy), outputs
