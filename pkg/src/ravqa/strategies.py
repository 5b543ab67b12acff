"""Serialization strategies tying answers and rationales into one token stream.

Four variants: answer-then-rationale (explanation), rationale-then-answer
(reasoning), answer only, and a two-model pipeline where the first model
writes the rationale and a second model reads it back alongside the question
to produce the answer. Keywords are reserved vocabulary tokens, so a decoded
sequence splits unambiguously as long as the payload text never contains
them; serialization refuses payloads that do.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import data as dat
from .errors import ContractViolation, DataError
from .model import GatedFusionModel


class Strategy(str, Enum):
    EXPLANATION = "explanation"
    REASONING = "reasoning"
    NO_RATIONALE = "no-rationale"
    TWO_STAGE = "two-stage"


# How evaluation reports label each variant.
REPORT_LABELS = {
    Strategy.EXPLANATION: "w/ Explanation",
    Strategy.REASONING: "w/ Reasoning",
    Strategy.NO_RATIONALE: "w/o R",
    Strategy.TWO_STAGE: "w/ Two-Stage Reasoning",
}

ANSWER_KW, RATIONALE_KW, QUESTION_KW = dat.KEYWORDS


@dataclass
class GenerationOutput:
    """Parsed result of one generation; raw always holds the decoded text."""

    answer: str
    rationale: str | None
    raw: str
    parse_ok: bool
    raw_ids: list[int] = field(default_factory=list)
    stage2_input: str | None = None


def _check_payload(kind: str, text: str) -> str:
    text = " ".join(text.split())
    if not text:
        raise ContractViolation(f"{kind} must be non-empty")
    for keyword in dat.KEYWORDS:
        if keyword in text.split():
            raise DataError(f"{kind} contains the reserved keyword {keyword!r}")
    return text


def make_target(
    strategy: Strategy,
    answer: str,
    rationale: str | None = None,
    stage: int | None = None,
) -> str:
    """Serialize an (answer, rationale) pair for one strategy.

    The two-stage variant needs stage=1 (rationale target) or stage=2
    (answer target); the other variants take no stage.
    """
    strategy = Strategy(strategy)
    if strategy is Strategy.TWO_STAGE:
        if stage not in (1, 2):
            raise ContractViolation("two-stage serialization needs stage=1 or stage=2")
        if stage == 1:
            return f"{RATIONALE_KW} {_check_payload('rationale', rationale or '')}"
        return f"{ANSWER_KW} {_check_payload('answer', answer)}"
    if stage is not None:
        raise ContractViolation(f"stage applies only to the two-stage strategy, not {strategy.value}")
    answer = _check_payload("answer", answer)
    if strategy is Strategy.NO_RATIONALE:
        return f"{ANSWER_KW} {answer}"
    rationale = _check_payload("rationale", rationale or "")
    if strategy is Strategy.EXPLANATION:
        return f"{ANSWER_KW} {answer} {RATIONALE_KW} {rationale}"
    return f"{RATIONALE_KW} {rationale} {ANSWER_KW} {answer}"


def _segments(tokens: list[str], expected: list[str]) -> list[str] | None:
    """Split tokens on the expected keyword order; None when the shape is off."""
    positions = [i for i, tok in enumerate(tokens) if tok in dat.KEYWORDS]
    if [tokens[i] for i in positions] != expected or not positions or positions[0] != 0:
        return None
    bounds = positions + [len(tokens)]
    parts = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        part = tokens[start + 1 : stop]
        if not part:
            return None
        parts.append(" ".join(part))
    return parts


def parse_output(strategy: Strategy, decoded: str) -> GenerationOutput:
    """Invert make_target on decoded text; malformed shapes set parse_ok False.

    The two-stage variant parses the final (answer) shape here; stage-1
    rationale text goes through parse_stage1_rationale instead.
    """
    strategy = Strategy(strategy)
    tokens = decoded.split()
    failed = GenerationOutput(answer="", rationale=None, raw=decoded, parse_ok=False)
    if strategy in (Strategy.NO_RATIONALE, Strategy.TWO_STAGE):
        parts = _segments(tokens, [ANSWER_KW])
        if parts is None:
            return failed
        return GenerationOutput(answer=parts[0], rationale=None, raw=decoded, parse_ok=True)
    if strategy is Strategy.EXPLANATION:
        parts = _segments(tokens, [ANSWER_KW, RATIONALE_KW])
        if parts is None:
            return failed
        return GenerationOutput(answer=parts[0], rationale=parts[1], raw=decoded, parse_ok=True)
    parts = _segments(tokens, [RATIONALE_KW, ANSWER_KW])
    if parts is None:
        return failed
    return GenerationOutput(answer=parts[1], rationale=parts[0], raw=decoded, parse_ok=True)


def parse_stage1_rationale(decoded: str) -> tuple[str | None, bool]:
    """Rationale text from a stage-1 decode, or (None, False) when malformed."""
    parts = _segments(decoded.split(), [RATIONALE_KW])
    if parts is None:
        return None, False
    return parts[0], True


def stage2_input_text(question: str, rationale: str) -> str:
    """The exact serialized input the answer-stage model reads."""
    return f"{QUESTION_KW} {question} {RATIONALE_KW} {rationale}".strip()


def greedy_ids(
    model: GatedFusionModel,
    vocab: dat.Vocab,
    input_text: str,
    image: np.ndarray,
    max_len: int | None = None,
) -> list[int]:
    """Greedy decode: argmax token ids until the end token or the cap."""
    n_max = model.config.n_max
    cap = n_max - 1 if max_len is None else max_len
    if cap < 1:
        raise ContractViolation(f"max_len must be at least 1, got {cap}")
    ids, mask = dat.encode(vocab, input_text, n_max)
    real = [i for i, keep in zip(ids, mask) if keep]
    trace = model.fuse(real, image)
    prefix = [dat.BOS_ID]
    out: list[int] = []
    while len(out) < cap:
        logits = model.decode_logits(trace.fused, prefix)
        nxt = int(np.argmax(logits.nd()[-1]))
        out.append(nxt)
        if nxt == dat.EOS_ID or len(prefix) >= n_max:
            break
        prefix.append(nxt)
    return out


def generate(
    model: GatedFusionModel,
    vocab: dat.Vocab,
    strategy: Strategy,
    question: str,
    image: np.ndarray,
    max_len: int | None = None,
) -> GenerationOutput:
    """Single-model inference: greedy decode then strategy-aware parse."""
    strategy = Strategy(strategy)
    if strategy is Strategy.TWO_STAGE:
        raise ContractViolation("two-stage inference needs two models; use two_stage_generate")
    raw_ids = greedy_ids(model, vocab, question, image, max_len)
    out = parse_output(strategy, dat.decode(vocab, raw_ids))
    out.raw_ids = raw_ids
    return out


def two_stage_generate(
    stage1: GatedFusionModel,
    stage2: GatedFusionModel,
    vocab: dat.Vocab,
    question: str,
    image: np.ndarray,
    max_len: int | None = None,
) -> GenerationOutput:
    """Rationale from the first model, then answer from the second.

    The stage-2 input interleaves the question and the stage-1 rationale
    verbatim; the returned rationale is exactly the stage-1 text.
    """
    if stage1 is stage2:
        raise ContractViolation("the two stages must be distinct models")
    stage1_ids = greedy_ids(stage1, vocab, question, image, max_len)
    stage1_text = dat.decode(vocab, stage1_ids)
    rationale, stage1_ok = parse_stage1_rationale(stage1_text)
    if not stage1_ok:
        rationale = stage1_text  # degrade gracefully: feed raw text forward
    stage2_input = stage2_input_text(question, rationale)
    stage2_ids = greedy_ids(stage2, vocab, stage2_input, image, max_len)
    parsed = parse_output(Strategy.TWO_STAGE, dat.decode(vocab, stage2_ids))
    return GenerationOutput(
        answer=parsed.answer,
        rationale=rationale if rationale else None,
        raw=parsed.raw,
        parse_ok=parsed.parse_ok and stage1_ok,
        raw_ids=stage2_ids,
        stage2_input=stage2_input,
    )
