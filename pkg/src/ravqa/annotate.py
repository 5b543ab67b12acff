"""Rationale annotation workflow: generation, review, escalation, export.

Each record moves through a small state machine:

    pending_generation --generate--> pending_review
    pending_review --approve-------> approved                (terminal)
    pending_review --reject--------> regenerate              while attempts < 3
    pending_review --reject--------> expert_escalated        at attempts == 3
    regenerate --generate----------> pending_review
    expert_escalated --expert------> expert_written          (terminal)

A generation attempt is counted when a rationale is actually produced;
transport failures leave the record where it was (recording the error) so
flaky connectivity never burns the attempt budget. Every mutation carries an
expected version for optimistic concurrency and appends one event to a
replayable log, so a store folded from its log always equals the live one.
"""

from __future__ import annotations

import json
import os
import string
import threading
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from . import data as dat
from .errors import (
    ContractViolation,
    DataError,
    TransitionError,
    TransportError,
    VersionConflictError,
)

MAX_ATTEMPTS = 3


class RecordState(str, Enum):
    PENDING_GENERATION = "pending_generation"
    PENDING_REVIEW = "pending_review"
    APPROVED = "approved"
    REGENERATE = "regenerate"
    EXPERT_ESCALATED = "expert_escalated"
    EXPERT_WRITTEN = "expert_written"


TERMINAL_STATES = frozenset({RecordState.APPROVED, RecordState.EXPERT_WRITTEN})
GENERATABLE_STATES = frozenset({RecordState.PENDING_GENERATION, RecordState.REGENERATE})


@dataclass(frozen=True)
class ReviewVerdict:
    """Three independent quality criteria; approval needs all of them."""

    accurate: bool
    relevant: bool
    complete: bool
    note: str | None = None

    @property
    def approved(self) -> bool:
        return self.accurate and self.relevant and self.complete


@dataclass(frozen=True)
class AnnotationRecord:
    """One sample moving through the annotation workflow. Immutable; every
    transition returns a fresh record with the version bumped."""

    id: str
    image_ref: str
    question: str
    answer: str
    qtype: str
    split: str
    state: RecordState = RecordState.PENDING_GENERATION
    rationale: str | None = None
    attempts: int = 0
    version: int = 1
    last_error: str | None = None
    source: str | None = None  # "model" or "expert" once a rationale exists
    category: str | None = None
    dataset: str | None = None
    pixels: list[list[float]] | None = None  # inline image for reviewers

    def to_json(self) -> dict:
        out = asdict(self)
        out["state"] = self.state.value
        return out

    @classmethod
    def from_json(cls, record: dict) -> "AnnotationRecord":
        record = dict(record)
        record["state"] = RecordState(record["state"])
        return cls(**record)


def record_from_sample(sample: dat.VqaSample) -> AnnotationRecord:
    return AnnotationRecord(
        id=sample.id,
        image_ref=sample.image_ref,
        question=sample.question,
        answer=sample.answer,
        qtype=sample.qtype,
        split=sample.split,
        category=sample.category,
        dataset=sample.dataset,
        pixels=sample.pixels,
    )


# -- pure transitions --------------------------------------------------------


def apply_generated(record: AnnotationRecord, rationale: str) -> AnnotationRecord:
    """A rationale arrived: consume one attempt and queue for review."""
    if record.state not in GENERATABLE_STATES:
        raise TransitionError(f"record {record.id!r} is {record.state.value}, not awaiting generation")
    if not rationale.strip():
        raise DataError(f"record {record.id!r}: generated rationale is empty")
    if record.attempts >= MAX_ATTEMPTS:
        raise TransitionError(f"record {record.id!r} already used its {MAX_ATTEMPTS} attempts")
    return replace(
        record,
        state=RecordState.PENDING_REVIEW,
        rationale=rationale.strip(),
        attempts=record.attempts + 1,
        version=record.version + 1,
        last_error=None,
        source="model",
    )


def apply_generation_failure(record: AnnotationRecord, error: str) -> AnnotationRecord:
    """Transport trouble: keep the state and the attempt budget, note the error."""
    if record.state not in GENERATABLE_STATES:
        raise TransitionError(f"record {record.id!r} is {record.state.value}, not awaiting generation")
    return replace(record, last_error=error, version=record.version + 1)


def apply_review(record: AnnotationRecord, verdict: ReviewVerdict) -> AnnotationRecord:
    """Approve outright, or send back for regeneration until attempts run out."""
    if record.state is not RecordState.PENDING_REVIEW:
        raise TransitionError(f"record {record.id!r} is {record.state.value}, not under review")
    if verdict.approved:
        state = RecordState.APPROVED
    elif record.attempts >= MAX_ATTEMPTS:
        state = RecordState.EXPERT_ESCALATED
    else:
        state = RecordState.REGENERATE
    return replace(record, state=state, version=record.version + 1)


def apply_expert(record: AnnotationRecord, rationale: str) -> AnnotationRecord:
    """An expert writes the rationale directly; only escalated records qualify."""
    if record.state is not RecordState.EXPERT_ESCALATED:
        raise TransitionError(f"record {record.id!r} is {record.state.value}, not escalated")
    if not rationale.strip():
        raise DataError(f"record {record.id!r}: expert rationale is empty")
    return replace(
        record,
        state=RecordState.EXPERT_WRITTEN,
        rationale=rationale.strip(),
        version=record.version + 1,
        last_error=None,
        source="expert",
    )


# -- generator clients -------------------------------------------------------


class GeneratorClient(Protocol):
    def generate_rationale(self, question: str, answer: str, image_ref: str) -> str:
        """Return rationale text; raise TransportError when the call fails."""
        ...


class MockGeneratorClient:
    """Deterministic offline generator; fail_times forces early transport errors."""

    def __init__(self, seed: int = 0, fail_times: int = 0, template: str | None = None):
        self.seed = seed
        self.calls = 0
        self.fail_times = fail_times
        self.template = template or "the finding supports {answer} for {question}"

    def generate_rationale(self, question: str, answer: str, image_ref: str) -> str:
        self.calls += 1
        if self.calls <= self.fail_times:
            raise TransportError(f"mock transport failure {self.calls}/{self.fail_times}")
        return self.template.format(question=question.rstrip(" ?"), answer=answer)


class HttpGeneratorClient:
    """POSTs {question, answer, image_ref} as JSON, expects {"rationale": ...}.

    The bearer token, when the RAVQA_GENERATOR_TOKEN environment variable is
    set, rides in the Authorization header.
    """

    def __init__(self, url: str, timeout: float = 10.0):
        if not url.startswith(("http://", "https://")):
            raise ContractViolation(f"generator url must be http(s), got {url!r}")
        self.url = url
        self.timeout = timeout

    def generate_rationale(self, question: str, answer: str, image_ref: str) -> str:
        body = json.dumps(
            {"question": question, "answer": answer, "image_ref": image_ref}
        ).encode("utf-8")
        request = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        token = os.environ.get("RAVQA_GENERATOR_TOKEN")
        if token:
            request.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise TransportError(f"generator call to {self.url} failed: {exc}") from exc
        rationale = payload.get("rationale") if isinstance(payload, dict) else None
        if not isinstance(rationale, str) or not rationale.strip():
            raise TransportError(f"generator at {self.url} returned no rationale")
        return rationale


# -- event-sourced store -----------------------------------------------------


def _fold(records: dict[str, AnnotationRecord], event: dict) -> None:
    kind = event["kind"]
    data = event["data"]
    if kind == "created":
        record = AnnotationRecord.from_json(data)
        if record.id in records:
            raise DataError(f"duplicate creation event for record {record.id!r}")
        records[record.id] = record
        return
    record = records.get(event["record"])
    if record is None:
        raise DataError(f"event for unknown record {event['record']!r}")
    if kind == "rationale_generated":
        records[record.id] = apply_generated(record, data["rationale"])
    elif kind == "generation_failed":
        records[record.id] = apply_generation_failure(record, data["error"])
    elif kind == "review_recorded":
        verdict = ReviewVerdict(data["accurate"], data["relevant"], data["complete"], data.get("note"))
        records[record.id] = apply_review(record, verdict)
    elif kind == "expert_submitted":
        records[record.id] = apply_expert(record, data["rationale"])
    else:
        raise DataError(f"unknown event kind {kind!r}")


class AnnotationStore:
    """Thread-safe record store backed by an append-only JSONL event log.

    Pass log_path=None for a purely in-memory store. Generator calls run
    under the store lock, which serializes generation at this scale in
    exchange for never racing a concurrent review.
    """

    def __init__(self, log_path: str | Path | None = None):
        self._lock = threading.Lock()
        self._records: dict[str, AnnotationRecord] = {}
        self._seq = 0
        self._log_path = Path(log_path) if log_path is not None else None
        if self._log_path is not None and self._log_path.exists():
            self._replay(self._log_path)

    def _replay(self, path: Path) -> None:
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: unreadable event: {exc}") from exc
            if event.get("seq") != self._seq + 1:
                raise DataError(f"{path}:{lineno}: event sequence broken (saw {event.get('seq')})")
            _fold(self._records, event)
            self._seq = event["seq"]

    def _append(self, kind: str, record_id: str, data: dict) -> None:
        self._seq += 1
        if self._log_path is None:
            return
        event = {"seq": self._seq, "kind": kind, "record": record_id, "data": data}
        with self._log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n")

    # -- queries ------------------------------------------------------------

    def get(self, record_id: str) -> AnnotationRecord:
        with self._lock:
            record = self._records.get(record_id)
            if record is None:
                raise DataError(f"no record {record_id!r}")
            return record

    def records(self, state: RecordState | str | None = None) -> list[AnnotationRecord]:
        wanted = RecordState(state) if state is not None else None
        with self._lock:
            rows = [r for r in self._records.values() if wanted is None or r.state is wanted]
        return sorted(rows, key=lambda r: r.id)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    # -- mutations ----------------------------------------------------------

    def add_sample(self, sample: dat.VqaSample) -> AnnotationRecord:
        record = record_from_sample(sample)
        with self._lock:
            if record.id in self._records:
                raise DataError(f"record {record.id!r} already exists")
            self._records[record.id] = record
            self._append("created", record.id, record.to_json())
        return record

    def add_samples(self, samples: Iterable[dat.VqaSample]) -> int:
        n = 0
        for sample in samples:
            self.add_sample(sample)
            n += 1
        return n

    def _check_version(self, record: AnnotationRecord, expected_version: int) -> None:
        if record.version != expected_version:
            raise VersionConflictError(record.id, expected_version, record.version)

    def request_generation(
        self, record_id: str, expected_version: int, client: GeneratorClient
    ) -> AnnotationRecord:
        """Fetch a rationale for the record; failures keep the attempt budget."""
        with self._lock:
            record = self._records.get(record_id)
            if record is None:
                raise DataError(f"no record {record_id!r}")
            self._check_version(record, expected_version)
            if record.state not in GENERATABLE_STATES:
                raise TransitionError(
                    f"record {record_id!r} is {record.state.value}, not awaiting generation"
                )
            try:
                rationale = client.generate_rationale(record.question, record.answer, record.image_ref)
            except TransportError as exc:
                updated = apply_generation_failure(record, str(exc))
                self._records[record_id] = updated
                self._append("generation_failed", record_id, {"error": str(exc)})
                raise
            updated = apply_generated(record, rationale)
            self._records[record_id] = updated
            self._append("rationale_generated", record_id, {"rationale": updated.rationale})
            return updated

    def record_review(
        self, record_id: str, expected_version: int, verdict: ReviewVerdict
    ) -> AnnotationRecord:
        with self._lock:
            record = self._records.get(record_id)
            if record is None:
                raise DataError(f"no record {record_id!r}")
            self._check_version(record, expected_version)
            updated = apply_review(record, verdict)
            self._records[record_id] = updated
            self._append(
                "review_recorded",
                record_id,
                {
                    "accurate": verdict.accurate,
                    "relevant": verdict.relevant,
                    "complete": verdict.complete,
                    "note": verdict.note,
                },
            )
            return updated

    def submit_expert(self, record_id: str, expected_version: int, rationale: str) -> AnnotationRecord:
        with self._lock:
            record = self._records.get(record_id)
            if record is None:
                raise DataError(f"no record {record_id!r}")
            self._check_version(record, expected_version)
            updated = apply_expert(record, rationale)
            self._records[record_id] = updated
            self._append("expert_submitted", record_id, {"rationale": updated.rationale})
            return updated

    # -- export ---------------------------------------------------------------

    def export_annotated(self, mode: str = "strict") -> list[dat.VqaSample]:
        """Records back into samples with rationales attached.

        strict: only approved and expert-written records. permissive: any
        record that has rationale text, whatever its review state.
        """
        if mode not in ("strict", "permissive"):
            raise ContractViolation(f"export mode must be strict or permissive, got {mode!r}")
        out = []
        for record in self.records():
            if mode == "strict" and record.state not in TERMINAL_STATES:
                continue
            if not record.rationale:
                continue
            out.append(
                dat.VqaSample(
                    id=record.id,
                    image_ref=record.image_ref,
                    question=record.question,
                    answer=record.answer,
                    qtype=record.qtype,
                    split=record.split,
                    rationale=record.rationale,
                    category=record.category,
                    dataset=record.dataset,
                    pixels=record.pixels,
                )
            )
        return out


# -- consistency checks -------------------------------------------------------


@dataclass(frozen=True)
class Inconsistency:
    rule: str
    record_ids: tuple[str, ...]
    message: str


_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def _norm_question(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT).split())


_WHOLE_IMAGE_NORMAL = frozenset(
    {
        "is this image normal",
        "is the image normal",
        "is this a normal image",
    }
)


def detect_inconsistencies(records: Sequence[AnnotationRecord]) -> list[Inconsistency]:
    """Cross-record answer conflicts on the same image.

    Rule duplicate-question: the same normalized question on one image must
    have one normalized answer. Rule whole-vs-part: an image declared normal
    as a whole contradicts any part of it declared not normal.
    """
    findings: list[Inconsistency] = []
    by_image: dict[str, list[AnnotationRecord]] = {}
    for record in records:
        by_image.setdefault(record.image_ref, []).append(record)
    for image_ref, group in sorted(by_image.items()):
        group = sorted(group, key=lambda r: r.id)
        by_question: dict[str, list[AnnotationRecord]] = {}
        for record in group:
            by_question.setdefault(_norm_question(record.question), []).append(record)
        for question, dupes in sorted(by_question.items()):
            answers = {dat.normalize_answer(r.answer) for r in dupes}
            if len(answers) > 1:
                findings.append(
                    Inconsistency(
                        rule="duplicate-question",
                        record_ids=tuple(r.id for r in dupes),
                        message=f"{image_ref}: {question!r} answered {sorted(answers)}",
                    )
                )
        whole_yes = [
            r
            for r in group
            if _norm_question(r.question) in _WHOLE_IMAGE_NORMAL
            and dat.normalize_answer(r.answer) == "yes"
        ]
        part_no = [
            r
            for r in group
            if _norm_question(r.question) not in _WHOLE_IMAGE_NORMAL
            and "normal" in _norm_question(r.question).split()
            and dat.normalize_answer(r.answer) == "no"
        ]
        for whole in whole_yes:
            for part in part_no:
                findings.append(
                    Inconsistency(
                        rule="whole-vs-part",
                        record_ids=(whole.id, part.id),
                        message=(
                            f"{image_ref}: image called normal in {whole.id!r} but "
                            f"{part.question!r} answered no in {part.id!r}"
                        ),
                    )
                )
    return findings
