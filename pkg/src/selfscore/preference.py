"""Self-generated preference pairs.

Score pairs contrast an explanation generated after the ground-truth score
(chosen) with one generated after a deliberately wrong score (rejected).
Consistency pairs reuse the same generations: the wrong score in the
rejected text is overwritten with the ground truth, so both responses carry
the same score and differ only in whether the explanation was written for it.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._util import ceil_fraction, sha256_text
from .backend.base import GenerationParams
from .codec import BinningScheme, encode_bin
from .errors import (
    BackendFailure,
    DatasetSchemaError,
    EmptyAllowedSet,
    FormatError,
    GenerationFormatError,
)
from .ingest import ScoredImage
from .prompting import (
    parse_response,
    render_conditioned_prefix,
    render_scoring_prompt,
    replace_score_token,
    response_head,
)

logger = logging.getLogger(__name__)

MIN_DISTANCE = 3
PAIR_FIELDS = ("image_id", "image_uri", "prompt_sha256", "chosen", "rejected",
               "gt_bin", "rejected_bin", "kind")


@dataclass(frozen=True)
class PreferencePair:
    """One DPO sample.

    For ``kind="consistency"`` the rejected text carries ``gt_bin`` after
    replacement; ``rejected_bin`` still records the score its explanation
    was originally generated for.
    """

    image_id: str
    image_uri: str
    prompt: str
    chosen: str
    rejected: str
    gt_bin: int
    rejected_bin: int
    kind: str

    def to_row(self) -> dict:
        row = asdict(self)
        row["prompt_sha256"] = sha256_text(row.pop("prompt"))
        return {k: row[k] for k in PAIR_FIELDS}


@dataclass
class DatasetStats:
    requested: int = 0
    written: int = 0
    dropped: int = 0
    failed: int = 0
    consistency_written: int = 0
    consistency_failed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def allowed_incorrect_bins(gt_bin: int, min_distance: int = MIN_DISTANCE) -> list[int]:
    return [b for b in range(10) if abs(b - gt_bin) >= min_distance]


def sample_incorrect_bin(gt_bin: int, rng: np.random.Generator, min_distance: int = MIN_DISTANCE) -> int:
    """Uniform draw among bins at least ``min_distance`` away from ``gt_bin``."""
    allowed = allowed_incorrect_bins(gt_bin, min_distance)
    if not allowed:
        raise EmptyAllowedSet(f"no bin is {min_distance} or more away from {gt_bin}")
    return allowed[int(rng.integers(len(allowed)))]


def _conditioned_response(handle, image_uri: str, bin: int, params, max_retries: int) -> str:
    prefix = render_conditioned_prefix(bin)
    for _ in range(max_retries + 1):
        text = response_head(bin) + handle.generate(image_uri, prefix, params)
        try:
            parse_response(text)
        except FormatError:
            continue
        return text
    raise GenerationFormatError(f"generation for bin {bin} did not parse after {max_retries} retries")


def make_score_pair(handle, image: ScoredImage, gt_bin: int, rejected_bin: int,
                    params: GenerationParams = GenerationParams(), max_retries: int = 1) -> PreferencePair:
    chosen = _conditioned_response(handle, image.image_uri, gt_bin, params, max_retries)
    rejected = _conditioned_response(handle, image.image_uri, rejected_bin, params, max_retries)
    return PreferencePair(image.image_id, image.image_uri, render_scoring_prompt(),
                          chosen, rejected, gt_bin, rejected_bin, "score")


def build_score_pair(handle, image: ScoredImage, scheme: BinningScheme, rng: np.random.Generator,
                     min_distance: int = MIN_DISTANCE, params: GenerationParams = GenerationParams(),
                     max_retries: int = 1) -> PreferencePair:
    gt = encode_bin(scheme, image.raw_score)
    wrong = sample_incorrect_bin(gt, rng, min_distance)
    return make_score_pair(handle, image, gt, wrong, params, max_retries)


def derive_consistency_pair(pair: PreferencePair, *, check_kind: bool = True) -> PreferencePair:
    if check_kind and pair.kind != "score":
        raise ValueError(f"expected a score pair, got kind={pair.kind!r}")
    rejected = replace_score_token(pair.rejected, pair.gt_bin)
    return PreferencePair(pair.image_id, pair.image_uri, pair.prompt, pair.chosen, rejected,
                          pair.gt_bin, pair.rejected_bin, "consistency")


def write_pairs(path, pairs: Sequence[PreferencePair], kind: str, **header_extra) -> Path:
    """JSONL with a header record (prompt stored once) followed by one row per pair."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prompt = render_scoring_prompt()
    header = {"header": True, "kind": kind, "prompt": prompt,
              "prompt_sha256": sha256_text(prompt), "count": len(pairs)}
    header.update(header_extra)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for p in pairs:
            fh.write(json.dumps(p.to_row(), sort_keys=True) + "\n")
    return path


def load_pairs(path) -> tuple[dict, list[PreferencePair]]:
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise DatasetSchemaError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetSchemaError(f"{path}: bad header: {exc}") from exc
    if not header.get("header") or "prompt" not in header:
        raise DatasetSchemaError(f"{path}: first record must be the prompt header")
    prompt = header["prompt"]
    digest = sha256_text(prompt)
    pairs = []
    for lineno, text in enumerate(lines[1:], start=2):
        try:
            row = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetSchemaError(f"{path}:{lineno}: {exc.msg}") from exc
        missing = [f for f in PAIR_FIELDS if f not in row]
        if missing:
            raise DatasetSchemaError(f"{path}:{lineno}: missing {missing}")
        if row["prompt_sha256"] != digest:
            raise DatasetSchemaError(f"{path}:{lineno}: prompt hash does not match header")
        if row["kind"] not in ("score", "consistency"):
            raise DatasetSchemaError(f"{path}:{lineno}: unknown kind {row['kind']!r}")
        try:
            gt, rb = int(row["gt_bin"]), int(row["rejected_bin"])
        except (TypeError, ValueError) as exc:
            raise DatasetSchemaError(f"{path}:{lineno}: bad bin value") from exc
        pairs.append(PreferencePair(row["image_id"], row["image_uri"], prompt, row["chosen"],
                                    row["rejected"], gt, rb, row["kind"]))
    return header, pairs


def build_dataset(handle, records: Sequence[ScoredImage], scheme: BinningScheme,
                  rng: np.random.Generator, fraction: float, out_path,
                  consistency_path=None, consistency_fraction: float = 1.0,
                  min_distance: int = MIN_DISTANCE, params: GenerationParams = GenerationParams(),
                  max_retries: int = 1, generator_id: str | None = None,
                  workers: int = 1) -> DatasetStats:
    """Generate the score-pair file and, optionally, the derived consistency file.

    ``ceil(fraction * N)`` records are drawn without replacement and kept in
    input order. Incorrect bins are drawn up front, so the output does not
    depend on ``workers``. Per-record failures are counted, never raised.
    """
    if not records:
        raise ValueError("no records to generate from")
    n = len(records)
    take = ceil_fraction(fraction, n)
    idx = np.sort(rng.choice(n, size=take, replace=False))
    chosen_records = [records[i] for i in idx]
    gts = [encode_bin(scheme, r.raw_score) for r in chosen_records]
    wrongs = [sample_incorrect_bin(g, rng, min_distance) for g in gts]

    def one(args):
        rec, gt, wrong = args
        try:
            return make_score_pair(handle, rec, gt, wrong, params, max_retries)
        except GenerationFormatError as exc:
            return exc
        except BackendFailure as exc:
            return exc

    jobs = list(zip(chosen_records, gts, wrongs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]

    stats = DatasetStats(requested=take)
    pairs = []
    for rec, res in zip(chosen_records, results):
        if isinstance(res, GenerationFormatError):
            stats.dropped += 1
            logger.debug("dropped %s: %s", rec.image_id, res)
        elif isinstance(res, Exception):
            stats.failed += 1
            logger.warning("generation failed for %s: %s", rec.image_id, res)
        else:
            pairs.append(res)
    stats.written = len(pairs)
    write_pairs(out_path, pairs, "score", generator=generator_id, min_distance=min_distance)

    if consistency_path is not None:
        keep = ceil_fraction(consistency_fraction, len(pairs)) if pairs else 0
        sel = np.sort(rng.choice(len(pairs), size=keep, replace=False)) if keep else []
        derived = []
        for i in sel:
            try:
                derived.append(derive_consistency_pair(pairs[i]))
            except FormatError:
                stats.consistency_failed += 1
        stats.consistency_written = len(derived)
        write_pairs(consistency_path, derived, "consistency", generator=generator_id,
                    min_distance=min_distance)
    return stats
