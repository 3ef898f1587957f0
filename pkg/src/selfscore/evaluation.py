"""Correlation metrics, score decoding over a split and LLM-judge consistency."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.stats import rankdata

from .codec import BinningScheme, ReferenceValues, decode_expected, softmax_scores
from .errors import (AllFailed, DegenerateVariance, FormatError, JudgeFormatError, ProviderError,
                     SelfScoreError)
from .prompting import load_prompt, parse_response, render_scoring_prompt, score_slot_prompt
from .backend.base import GenerationParams
from ._util import child_rng, write_json

logger = logging.getLogger(__name__)

RATING_VALUES = {"bad": 0, "poor": 1, "fair": 2, "good": 3, "excellent": 4}
JUDGE_KEYS = ("consistency", "usefulness", "general")


# metrics ---------------------------------------------------------------------

def _pair(pred, gt, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(gt, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} values")
    return x, y


def plcc(pred, gt) -> float:
    x, y = _pair(pred, gt, 2)
    xc = x - x.mean()
    yc = y - y.mean()
    ax, ay = np.max(np.abs(xc)), np.max(np.abs(yc))
    if ax == 0 or ay == 0:
        raise DegenerateVariance("correlation undefined for constant input")
    # rescaling keeps the sums of squares away from under- and overflow
    xc, yc = xc / ax, yc / ay
    # one square root of the product keeps exact cases such as x vs -x at exactly -1
    denom = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0))


def srcc(pred, gt) -> float:
    """Pearson correlation of average ranks."""
    x, y = _pair(pred, gt, 2)
    return plcc(rankdata(x, method="average"), rankdata(y, method="average"))


def rmse(pred, gt) -> float:
    x, y = _pair(pred, gt, 1)
    return float(np.sqrt(np.mean((x - y) ** 2)))


# records ---------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    predicted_bin: int
    predicted_raw: float
    gt_raw: float
    explanation: str

    def __post_init__(self):
        if not 0 <= self.predicted_bin <= 9:
            raise ValueError("predicted_bin must lie in 0..9")


@dataclass(frozen=True)
class JudgeVerdict:
    consistency: int
    usefulness: int
    general: int

    def __post_init__(self):
        for k in JUDGE_KEYS:
            if not 0 <= getattr(self, k) <= 4:
                raise ValueError(f"{k} must lie in 0..4")


def write_predictions(path, records: Sequence[PredictionRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return path


def read_predictions(path) -> list[PredictionRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [PredictionRecord(**json.loads(line)) for line in fh if line.strip()]


# scoring ---------------------------------------------------------------------

@dataclass
class ScoringResult:
    metrics: dict
    records: list[PredictionRecord]
    failures: int = 0


def predict_distributions(handle, records) -> np.ndarray:
    """Softmax over the score-token logits for each record, one row per record."""
    prompt = score_slot_prompt()
    return np.array([softmax_scores(handle.score_token_logits(r.image_uri, prompt)) for r in records])


def evaluate_scoring(handle, records, scheme: BinningScheme, ref: ReferenceValues,
                     params: GenerationParams = GenerationParams(),
                     explain: bool = True) -> ScoringResult:
    """Decode a score per record and compare with the ground truth.

    Backend errors on a record are logged and counted; the metrics cover the
    records that succeeded.
    """
    s_bar = ref.as_array()
    lo, hi = float(s_bar.min()), float(s_bar.max())
    slot = score_slot_prompt()
    prompt = render_scoring_prompt()
    out, failures = [], 0
    for r in records:
        try:
            p = softmax_scores(handle.score_token_logits(r.image_uri, slot))
            raw = float(np.clip(decode_expected(p, s_bar), lo, hi))
            bin_ = int(np.argmax(p))
            text = ""
            if explain:
                try:
                    parsed = parse_response(handle.generate(r.image_uri, prompt, params))
                    bin_, text = parsed.score_bin, parsed.explanation
                except FormatError:
                    logger.warning("unparseable generation for %s", r.image_id)
            out.append(PredictionRecord(r.image_id, bin_, raw, float(r.raw_score), text))
        except SelfScoreError as exc:
            failures += 1
            logger.warning("scoring failed for %s: %s", r.image_id, exc)
    pred = [r.predicted_raw for r in out]
    gt = [r.gt_raw for r in out]
    metrics = {"plcc": plcc(pred, gt), "srcc": srcc(pred, gt), "rmse": rmse(pred, gt),
               "n": len(out), "failures": failures}
    return ScoringResult(metrics, out, failures)


# judge -----------------------------------------------------------------------

@runtime_checkable
class CompletionProvider(Protocol):
    """Single request in, single text out."""

    def complete(self, prompt: str) -> str: ...


class StubProvider:
    """Returns a fixed reply; optionally fails every ``fail_every``-th call."""

    def __init__(self, reply: str = '{"consistency": "poor", "usefulness": "good", "general": "fair"}',
                 fail_every: int = 0):
        self.reply = reply
        self.fail_every = fail_every
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
            n = self.calls
        if self.fail_every and n % self.fail_every == 0:
            raise ProviderError("stub failure")
        return self.reply


class RateLimiter:
    """Spaces calls at least ``min_interval`` seconds apart across threads."""

    def __init__(self, min_interval: float = 0.0, clock=time.monotonic, sleep=time.sleep):
        self.min_interval = min_interval
        self.clock = clock
        self.sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self.clock()
            start = max(now, self._next)
            self._next = start + self.min_interval
        if start > now:
            self.sleep(start - now)


def render_judge_prompt(score_bin: int, explanation: str) -> str:
    if isinstance(score_bin, bool) or not isinstance(score_bin, (int, np.integer)) or not 0 <= score_bin <= 9:
        raise ValueError(f"score bin must be an integer in 0..9, got {score_bin!r}")
    return load_prompt("judge").replace("{score}", str(int(score_bin))).replace("{text}", explanation)


def _first_json_object(text: str) -> dict:
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise JudgeFormatError("no JSON object in judge reply")


def parse_judge_json(text: str) -> JudgeVerdict:
    obj = _first_json_object(text)
    values = {}
    for key in JUDGE_KEYS:
        if key not in obj:
            raise JudgeFormatError(f"judge reply lacks {key!r}")
        word = obj[key]
        if not isinstance(word, str) or word.strip().lower() not in RATING_VALUES:
            raise JudgeFormatError(f"unknown rating {word!r} for {key!r}")
        values[key] = RATING_VALUES[word.strip().lower()]
    return JudgeVerdict(**values)


@dataclass
class JudgeSummary:
    cons: float
    use: float
    gen: float
    n: int
    failures: int
    verdicts: dict[str, JudgeVerdict] = field(default_factory=dict)

    def means(self) -> tuple[float, float, float]:
        return self.cons, self.use, self.gen


def _judge_one(provider, record: PredictionRecord, attempts: int, backoff: float,
               limiter: RateLimiter, sleep) -> JudgeVerdict:
    prompt = render_judge_prompt(record.predicted_bin, record.explanation)
    last = None
    for attempt in range(attempts):
        limiter.wait()
        try:
            reply = provider.complete(prompt)
        except Exception as exc:  # provider adapters raise arbitrary transport errors
            last = exc
            if attempt + 1 < attempts:
                sleep(backoff * 2 ** attempt)
            continue
        return parse_judge_json(reply)
    raise ProviderError(f"judge call failed after {attempts} attempts: {last}")


def judge_batch(provider, records: Sequence[PredictionRecord], sample_cap: int = 1000, seed: int = 0,
                attempts: int = 3, backoff: float = 0.5, max_in_flight: int = 4,
                limiter: RateLimiter | None = None, sleep=time.sleep) -> JudgeSummary:
    """Judge a seeded uniform sample of at most ``sample_cap`` records.

    Provider errors are retried with exponential backoff; unparseable replies
    are not retried. Both count as failures and are left out of the means.
    """
    if sample_cap < 1:
        raise ValueError("sample_cap must be positive")
    records = list(records)
    if len(records) > sample_cap:
        idx = np.sort(child_rng(seed, "judge-sample").choice(len(records), sample_cap, replace=False))
        records = [records[i] for i in idx]
    limiter = limiter or RateLimiter()

    def task(r):
        try:
            return r.image_id, _judge_one(provider, r, attempts, backoff, limiter, sleep)
        except (ProviderError, JudgeFormatError) as exc:
            logger.warning("judge failed for %s: %s", r.image_id, exc)
            return r.image_id, None

    if max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            results = list(pool.map(task, records))
    else:
        results = [task(r) for r in records]
    verdicts = {k: v for k, v in sorted(results, key=lambda kv: kv[0]) if v is not None}
    failures = len(results) - len(verdicts)
    if not verdicts:
        raise AllFailed(f"none of {len(results)} judge calls produced a verdict")
    arr = np.array([[getattr(v, k) for k in JUDGE_KEYS] for v in verdicts.values()], dtype=float)
    cons, use, gen = (float(m) for m in arr.mean(axis=0))
    return JudgeSummary(cons, use, gen, len(verdicts), failures, verdicts)


def metrics_report(scoring: dict, judge: JudgeSummary | None = None) -> dict:
    """Flat report with the fixed key set; judge fields are null when not run."""
    return {
        "plcc": scoring["plcc"], "srcc": scoring["srcc"], "rmse": scoring["rmse"],
        "cons": judge.cons if judge else None, "use": judge.use if judge else None,
        "gen": judge.gen if judge else None, "n": scoring["n"],
        "judge_failures": judge.failures if judge else None,
    }


def write_metrics(path, report: dict) -> Path:
    return write_json(path, report)
