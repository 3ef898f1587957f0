"""Image-score dataset manifests.

A manifest is a flat file (JSONL or CSV) with one row per image. Each row
names the image, points at its asset and carries either a precomputed mean
score or the raw list of user ratings. Image bytes are never touched here.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DuplicateId, EmptyRatings, MissingField, ParseError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ScoredImage:
    image_id: str
    image_uri: str
    raw_score: float
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not math.isfinite(self.raw_score):
            raise ValueError(f"raw_score for {self.image_id!r} is not finite")


@dataclass
class DatasetManifest:
    name: str
    records: list[ScoredImage]
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.records:
            raise ValueError("manifest has no records")
        tally = Counter(r.split for r in self.records)
        self.counts = {s: tally.get(s, 0) for s in SPLITS}

    def __len__(self) -> int:
        return len(self.records)


def compute_mean_score(ratings: Sequence[float]) -> float:
    """Arithmetic mean of a list of user ratings."""
    if len(ratings) == 0:
        raise EmptyRatings("ratings list is empty")
    values = [float(r) for r in ratings]
    if not all(math.isfinite(v) for v in values):
        raise ValueError("ratings must be finite")
    return math.fsum(values) / len(values)


def _record_from_row(row: dict, line: int) -> ScoredImage:
    for key in ("image_id", "image_uri", "split"):
        if row.get(key) in (None, ""):
            raise MissingField(key, line)
    raw = row.get("raw_score")
    ratings = row.get("ratings")
    if raw is None and ratings is None:
        raise MissingField("raw_score", line)
    try:
        score = float(raw) if raw is not None else compute_mean_score(ratings)
    except EmptyRatings as exc:
        raise ParseError(str(exc), line) from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad score value: {exc}", line) from exc
    try:
        return ScoredImage(str(row["image_id"]), str(row["image_uri"]), score, row["split"])
    except ValueError as exc:
        raise ParseError(str(exc), line) from exc


def _iter_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                row = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, lineno) from exc
            if not isinstance(row, dict):
                raise ParseError("row is not a JSON object", lineno)
            yield lineno, row


def _iter_csv(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            lineno = reader.line_num
            clean = {k: (v if v != "" else None) for k, v in row.items()}
            if clean.get("ratings") is not None:
                try:
                    clean["ratings"] = [float(x) for x in clean["ratings"].split(";") if x.strip()]
                except ValueError as exc:
                    raise ParseError(f"bad ratings list: {exc}", lineno) from exc
            yield lineno, clean


def load_manifest(path, format: str | None = None, name: str | None = None) -> DatasetManifest:
    """Load a manifest file, preserving row order.

    ``format`` is ``"jsonl"`` or ``"csv"``; when omitted it is inferred from
    the file suffix. Rows may mix precomputed ``raw_score`` values and
    ``ratings`` lists; a ratings list is reduced to its mean.
    """
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "jsonl")
    rows = _iter_csv(path) if fmt == "csv" else _iter_jsonl(path)
    records: list[ScoredImage] = []
    seen: set[str] = set()
    for lineno, row in rows:
        rec = _record_from_row(row, lineno)
        if rec.image_id in seen:
            raise DuplicateId(rec.image_id, lineno)
        seen.add(rec.image_id)
        records.append(rec)
    if not records:
        raise ParseError(f"{path} contains no records")
    return DatasetManifest(name or path.stem, records)


def save_manifest(manifest: DatasetManifest, path, format: str | None = None) -> Path:
    """Write a manifest so that ``load_manifest`` reproduces its records."""
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "image_uri", "raw_score", "ratings", "split"])
            for r in manifest.records:
                writer.writerow([r.image_id, r.image_uri, repr(r.raw_score), "", r.split])
    else:
        with open(path, "w", encoding="utf-8") as fh:
            for r in manifest.records:
                row = {"image_id": r.image_id, "image_uri": r.image_uri,
                       "raw_score": r.raw_score, "ratings": None, "split": r.split}
                fh.write(json.dumps(row) + "\n")
    return path


def split_filter(manifest: DatasetManifest, split: str) -> list[ScoredImage]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [r for r in manifest.records if r.split == split]
