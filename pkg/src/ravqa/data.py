"""Samples, manifests, vocabulary, and the synthetic grid corpus.

A manifest is line-delimited JSON: a header object carrying schema_version,
then one record per line. Files ending in .gz are read and written through
gzip with a zeroed timestamp so canonical bytes are reproducible. The
word-level vocabulary reserves the lowest ids for structural tokens and the
serialization keywords, which tokenize atomically and keep their case; all
other tokens are lowercased.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import math
import string
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

SCHEMA_VERSION = 1
QTYPES = ("closed", "open")
SPLITS = ("train", "test")
DEFAULT_CLOSED_ANSWERS = frozenset({"yes", "no"})

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
KEYWORDS = ("Answer:", "Rationale:", "Question:")
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>") + KEYWORDS

REGION_NAMES = ("upper left", "upper right", "lower left", "lower right")
DATASET_ALIASES = {"R-PathVQA": "R-Path"}


def normalize_answer(text: str) -> str:
    """Lowercase, trim, drop edge punctuation, collapse internal whitespace."""
    words = [w.strip(string.punctuation) for w in text.lower().split()]
    return " ".join(w for w in words if w)


@dataclass
class VqaSample:
    """One question over one image, with an optional gold rationale."""

    id: str
    image_ref: str
    question: str
    answer: str
    qtype: str
    split: str
    rationale: str | None = None
    category: str | None = None
    dataset: str | None = None
    pixels: list[list[float]] | None = None

    def grid(self) -> np.ndarray:
        if self.pixels is None:
            raise DataError(f"sample {self.id!r} carries no pixel grid")
        return np.asarray(self.pixels, dtype=np.float64)


def validate_sample(sample: VqaSample, closed_answers: frozenset[str] = DEFAULT_CLOSED_ANSWERS) -> None:
    if not sample.id:
        raise DataError("sample id must be non-empty")
    if not sample.question.strip() or not sample.answer.strip():
        raise DataError(f"sample {sample.id!r}: question and answer must be non-empty")
    if sample.qtype not in QTYPES:
        raise DataError(f"sample {sample.id!r}: qtype {sample.qtype!r} not in {QTYPES}")
    if sample.split not in SPLITS:
        raise DataError(f"sample {sample.id!r}: split {sample.split!r} not in {SPLITS}")
    if sample.qtype == "closed" and normalize_answer(sample.answer) not in closed_answers:
        raise DataError(
            f"sample {sample.id!r}: closed-end answer {sample.answer!r} not in {sorted(closed_answers)}"
        )


# ---------------------------------------------------------------------------
# manifests


def _open_read(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def load_manifest(
    path: str | Path,
    closed_answers: frozenset[str] = DEFAULT_CLOSED_ANSWERS,
) -> list[VqaSample]:
    """Read and validate a manifest; duplicate or malformed records fail loudly."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    samples: list[VqaSample] = []
    seen: set[str] = set()
    with _open_read(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise DataError(f"{path}:{lineno}: record must be an object")
            if lineno == 1 and "schema_version" in record:
                if record["schema_version"] != SCHEMA_VERSION:
                    raise DataError(
                        f"{path}: schema_version {record['schema_version']!r} unsupported, "
                        f"this build reads {SCHEMA_VERSION}"
                    )
                continue
            try:
                sample = VqaSample(**record)
            except TypeError as exc:
                raise DataError(f"{path}:{lineno}: bad field set: {exc}") from exc
            validate_sample(sample, closed_answers)
            if sample.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return samples


def _record_json(sample: VqaSample) -> str:
    record = {k: v for k, v in asdict(sample).items() if v is not None}
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def save_manifest(path: str | Path, samples: Sequence[VqaSample]) -> None:
    """Write the canonical form: header line, then one sorted-key record per line."""
    path = Path(path)
    header = json.dumps({"schema_version": SCHEMA_VERSION}, sort_keys=True, separators=(",", ":"))
    text = "\n".join([header] + [_record_json(s) for s in samples]) + "\n"
    data = text.encode("utf-8")
    if path.suffix == ".gz":
        buf = io.BytesIO()
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
            gz.write(data)
        path.write_bytes(buf.getvalue())
    else:
        path.write_bytes(data)


# ---------------------------------------------------------------------------
# vocabulary


def tokenize(text: str) -> list[str]:
    """Whitespace split; keywords stay atomic and cased, everything else lowercases."""
    return [tok if tok in KEYWORDS else tok.lower() for tok in text.split()]


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise DataError(f"vocabulary must start with the reserved tokens {RESERVED}")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)


def build_vocab(samples: Iterable[VqaSample], min_count: int = 1) -> Vocab:
    """Frequency-then-lexicographic ids after the reserved block."""
    counts: Counter[str] = Counter()
    for sample in samples:
        for text in (sample.question, sample.answer, sample.rationale or ""):
            for tok in tokenize(text):
                if tok not in RESERVED:
                    counts[tok] += 1
    kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    return Vocab(list(RESERVED) + kept)


def encode(vocab: Vocab, text: str, n_max: int) -> tuple[list[int], list[bool]]:
    """Text -> (ids, mask): begin token, words, end token, padded out to n_max.

    Overflow truncates from the tail of the word sequence, never the head, so
    a leading question survives when a trailing rationale runs long.
    """
    if n_max < 2:
        raise DataError(f"n_max must fit the begin and end tokens, got {n_max}")
    ids = [BOS_ID] + [vocab.id_of(tok) for tok in tokenize(text)] + [EOS_ID]
    if len(ids) > n_max:
        ids = ids[: n_max - 1] + [EOS_ID]
    mask = [True] * len(ids) + [False] * (n_max - len(ids))
    ids = ids + [PAD_ID] * (n_max - len(ids))
    return ids, mask


def decode(vocab: Vocab, ids: Sequence[int]) -> str:
    """Ids -> text, dropping pad/begin/end; unknown ids render as the unk token."""
    words = []
    for i in ids:
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        if not 0 <= i < len(vocab.tokens):
            raise DataError(f"id {i} outside vocabulary of size {len(vocab.tokens)}")
        words.append(vocab.tokens[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# synthetic corpus


def _region_of(row: int, col: int, grid: int) -> str:
    vertical = "upper" if row < grid // 2 else "lower"
    horizontal = "left" if col < grid // 2 else "right"
    return f"{vertical} {horizontal}"


def synth_generate(
    n_items: int,
    seed: int,
    grid: int = 4,
    open_fraction: float = 0.0,
) -> list[VqaSample]:
    """Seeded corpus of single-marker grid images with rule-derived answers.

    Closed items ask whether the marker sits in a named quadrant; open items
    ask where it is. The train/test split takes the lowest 80% of ids by
    content hash, so membership is stable for a fixed seed and count.
    """
    if n_items < 1:
        raise DataError(f"n_items must be positive, got {n_items}")
    if grid < 2 or grid % 2:
        raise DataError(f"grid must be even and at least 2, got {grid}")
    if not 0.0 <= open_fraction <= 1.0:
        raise DataError(f"open_fraction must lie in [0, 1], got {open_fraction}")
    rng = np.random.default_rng(seed)
    samples: list[VqaSample] = []
    for i in range(n_items):
        row = int(rng.integers(0, grid))
        col = int(rng.integers(0, grid))
        actual = _region_of(row, col, grid)
        pixels = np.zeros((grid, grid))
        pixels[row, col] = 1.0
        sample_id = f"synth-{seed}-{i:05d}"
        is_open = bool(rng.uniform() < open_fraction)
        if is_open:
            question = "where is the lesion marker located ?"
            answer = f"the {actual} region"
            rationale = f"the marker is visible in the {actual} quadrant"
            qtype = "open"
        else:
            if rng.uniform() < 0.5:
                asked = actual
            else:
                others = [r for r in REGION_NAMES if r != actual]
                asked = others[int(rng.integers(0, len(others)))]
            question = f"is the lesion marker in the {asked} region ?"
            answer = "yes" if asked == actual else "no"
            rationale = f"the lesion marker appears in the {actual} region , therefore {answer}"
            qtype = "closed"
        samples.append(
            VqaSample(
                id=sample_id,
                image_ref=f"synthetic/{sample_id}.grid",
                question=question,
                answer=answer,
                qtype=qtype,
                split="train",
                rationale=rationale,
                category=actual,
                dataset="synthetic",
                pixels=pixels.tolist(),
            )
        )
    ranked = sorted(samples, key=lambda s: hashlib.sha256(s.id.encode()).hexdigest())
    cut = math.ceil(0.8 * len(ranked))
    test_ids = {s.id for s in ranked[cut:]}
    for sample in samples:
        if sample.id in test_ids:
            sample.split = "test"
    return samples


def fixture_manifest_paths() -> dict[str, Path]:
    """Bundled benchmark-statistics manifests, keyed by short dataset name."""
    root = Path(__file__).parent / "fixtures" / "table1"
    return {p.name.split(".")[0]: p for p in sorted(root.glob("*.jsonl.gz"))}


# ---------------------------------------------------------------------------
# statistics


@dataclass
class StatsRow:
    dataset: str
    qtype: str
    images: int
    train: int
    test: int


@dataclass
class StatsReport:
    rows: list[StatsRow]

    def cell(self, dataset: str, qtype: str) -> StatsRow:
        for row in self.rows:
            if row.dataset == dataset and row.qtype == qtype:
                return row
        raise KeyError(f"no stats row for ({dataset!r}, {qtype!r})")

    def to_text(self) -> str:
        lines = [f"{'dataset':<12} {'qtype':<8} {'images':>8} {'train':>8} {'test':>8}"]
        for row in self.rows:
            lines.append(
                f"{row.dataset:<12} {row.qtype:<8} {row.images:>8} {row.train:>8} {row.test:>8}"
            )
        if any(row.dataset == "R-Path" for row in self.rows):
            lines.append("note: R-Path is also published under the name R-PathVQA")
        return "\n".join(lines)


def dataset_stats(samples: Sequence[VqaSample]) -> StatsReport:
    """Distinct image and split counts per (dataset, question type)."""
    images: dict[tuple[str, str], set[str]] = {}
    counts: dict[tuple[str, str], dict[str, int]] = {}
    order: list[tuple[str, str]] = []
    for sample in samples:
        dataset = DATASET_ALIASES.get(sample.dataset or "unlabeled", sample.dataset or "unlabeled")
        key = (dataset, sample.qtype)
        if key not in counts:
            counts[key] = {"train": 0, "test": 0}
            images[key] = set()
            order.append(key)
        counts[key][sample.split] += 1
        images[key].add(sample.image_ref)
    rows = [
        StatsRow(ds, qt, len(images[(ds, qt)]), counts[(ds, qt)]["train"], counts[(ds, qt)]["test"])
        for ds, qt in order
    ]
    return StatsReport(rows)
