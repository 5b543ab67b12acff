"""Regenerate the bundled dataset-statistics fixtures.

Each fixture mirrors the published row counts of the three rationale-augmented
benchmark releases (R-RAD, R-SLAKE, R-Path). Records carry synthetic question
text; only the image/train/test arithmetic and the category breakdown of the
R-SLAKE closed test split are meaningful. Output is canonical gzipped JSONL,
so reruns are byte-identical.

Usage: python3 tools/gen_table1_fixtures.py
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ravqa.data import VqaSample, save_manifest  # noqa: E402

# (dataset, qtype) -> (distinct images, train rows, test rows)
TABLE1 = {
    ("R-RAD", "closed"): (300, 1823, 272),
    ("R-RAD", "open"): (267, 1241, 179),
    ("R-SLAKE", "closed"): (545, 1943, 416),
    ("R-SLAKE", "open"): (545, 2976, 645),
    ("R-Path", "closed"): (3361, 9806, 3391),
    ("R-Path", "open"): (3425, 9933, 3364),
}

# Category breakdown of the R-SLAKE closed-end test split.
SLAKE_TEST_CATEGORIES = [
    ("Lung", 141),
    ("Abdomen", 141),
    ("Head", 91),
    ("Neck", 16),
    ("Chest", 5),
    ("Pelvic Cavity", 22),
]

FILES = {"R-RAD": "r_rad.jsonl.gz", "R-SLAKE": "r_slake.jsonl.gz", "R-Path": "r_path.jsonl.gz"}


def rows_for(dataset: str, qtype: str, images: int, train: int, test: int) -> list[VqaSample]:
    short = dataset.lower().replace("-", "")
    samples = []
    categories = None
    if dataset == "R-SLAKE" and qtype == "closed":
        categories = []
        for name, count in SLAKE_TEST_CATEGORIES:
            categories.extend([name] * count)
        assert len(categories) == test
    for idx in range(train + test):
        split = "train" if idx < train else "test"
        if qtype == "closed":
            question = f"is finding {idx} visible in this study ?"
            answer = "yes" if idx % 2 == 0 else "no"
        else:
            question = f"what does region {idx} of this study show ?"
            answer = f"a field note for region {idx}"
        category = None
        if categories is not None and split == "test":
            category = categories[idx - train]
        samples.append(
            VqaSample(
                id=f"{short}-{qtype}-{idx:05d}",
                image_ref=f"images/{short}/{qtype}/{idx % images:05d}.png",
                question=question,
                answer=answer,
                qtype=qtype,
                split=split,
                category=category,
                dataset=dataset,
            )
        )
    return samples


def main() -> None:
    out_dir = Path(__file__).resolve().parents[1] / "src" / "ravqa" / "fixtures" / "table1"
    out_dir.mkdir(parents=True, exist_ok=True)
    by_dataset: dict[str, list[VqaSample]] = {ds: [] for ds in FILES}
    for (dataset, qtype), (images, train, test) in TABLE1.items():
        by_dataset[dataset].extend(rows_for(dataset, qtype, images, train, test))
    for dataset, filename in FILES.items():
        path = out_dir / filename
        save_manifest(path, by_dataset[dataset])
        print(f"wrote {path} ({len(by_dataset[dataset])} records)")


if __name__ == "__main__":
    main()
