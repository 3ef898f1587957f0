"""Quantile binning of continuous scores and expected-value decoding.

Continuous dataset scores are mapped to ten integer bins with equal
training mass. A model's distribution over the ten score tokens is mapped
back to the native scale as ``sum_i s_bar[i] * p[i]``, where the per-bin
reference values ``s_bar`` are fitted by least squares on validation data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateDesign, TooFewSamples

N_BINS = 10
RIDGE_LAMBDA = 1e-8


@dataclass(frozen=True)
class BinningScheme:
    """Nine ascending interior cuts plus the training range.

    A score ``x`` falls in the smallest bin ``i`` with ``x <= cuts[i]``;
    scores above the last cut land in bin 9. ``lo``/``hi`` are the training
    minimum and maximum, used for bin midpoints.
    """

    cuts: tuple[float, ...]
    lo: float
    hi: float
    n_bins: int = N_BINS

    def __post_init__(self):
        if len(self.cuts) != self.n_bins - 1:
            raise ValueError(f"expected {self.n_bins - 1} cuts, got {len(self.cuts)}")
        if any(b < a for a, b in zip(self.cuts, self.cuts[1:])):
            raise ValueError("cuts must be ascending")

    def encode(self, raw_score: float) -> int:
        return encode_bin(self, raw_score)

    def midpoints(self) -> np.ndarray:
        edges = np.array([self.lo, *self.cuts, self.hi], dtype=float)
        return 0.5 * (edges[:-1] + edges[1:])


@dataclass(frozen=True)
class ReferenceValues:
    s_bar: tuple[float, ...]

    def __post_init__(self):
        if len(self.s_bar) != N_BINS:
            raise ValueError(f"s_bar must have length {N_BINS}")
        if not np.all(np.isfinite(self.s_bar)):
            raise ValueError("s_bar must be finite")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.s_bar, dtype=float)


def fit_binning(train_scores: Sequence[float]) -> BinningScheme:
    """Equal-count quantile cuts over the sorted training scores.

    The sorted sample is sliced into ten groups of (nearly) equal size; the
    cut between group ``k`` and ``k + 1`` is the last value of group ``k``.
    With ties straddling a boundary the counts are no longer exactly equal,
    and all-identical data collapses every score into bin 0.
    """
    x = np.sort(np.asarray(train_scores, dtype=float))
    n = x.size
    if n < N_BINS:
        raise TooFewSamples(f"need at least {N_BINS} training scores, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("training scores must be finite")
    bounds = [(k * n) // N_BINS for k in range(1, N_BINS)]
    cuts = tuple(float(x[b - 1]) for b in bounds)
    return BinningScheme(cuts=cuts, lo=float(x[0]), hi=float(x[-1]))


def encode_bin(scheme: BinningScheme, raw_score: float) -> int:
    return int(np.searchsorted(np.asarray(scheme.cuts), float(raw_score), side="left"))


def encode_many(scheme: BinningScheme, raw_scores) -> np.ndarray:
    return np.searchsorted(np.asarray(scheme.cuts), np.asarray(raw_scores, dtype=float), side="left")


def softmax_scores(logits) -> np.ndarray:
    """Stable softmax over the ten score-token logits (last axis)."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_expected(dist, ref: ReferenceValues | Sequence[float]) -> float | np.ndarray:
    """Expected native-scale score under a bin distribution (or rows of them)."""
    s_bar = ref.as_array() if isinstance(ref, ReferenceValues) else np.asarray(ref, dtype=float)
    p = np.asarray(dist, dtype=float)
    out = p @ s_bar
    return float(out) if out.ndim == 0 else out


def default_reference_values(scheme: BinningScheme, train_scores: Sequence[float]) -> ReferenceValues:
    """Per-bin means of the training scores; empty bins borrow the nearest filled bin."""
    x = np.asarray(train_scores, dtype=float)
    bins = encode_many(scheme, x)
    means = np.full(N_BINS, np.nan)
    for i in range(N_BINS):
        if np.any(bins == i):
            means[i] = x[bins == i].mean()
    filled = np.flatnonzero(~np.isnan(means))
    for i in np.flatnonzero(np.isnan(means)):
        means[i] = means[filled[np.argmin(np.abs(filled - i))]]
    return ReferenceValues(tuple(float(v) for v in means))


def fit_reference_values(prob_rows, val_scores, *, allow_ridge: bool = True) -> ReferenceValues:
    """Least-squares fit of ``s_bar`` so that ``prob_rows @ s_bar ~ val_scores``.

    Falls back to a ridge solution with lambda = 1e-8 when the design is
    rank deficient; with ``allow_ridge=False`` that case raises instead.
    """
    P = np.asarray(prob_rows, dtype=float)
    y = np.asarray(val_scores, dtype=float)
    if P.ndim != 2 or P.shape[1] != N_BINS:
        raise ValueError(f"prob_rows must be N x {N_BINS}")
    if P.shape[0] != y.shape[0]:
        raise ValueError("prob_rows and val_scores differ in length")
    if P.shape[0] < N_BINS:
        raise TooFewSamples(f"need at least {N_BINS} validation rows, got {P.shape[0]}")
    if np.linalg.matrix_rank(P) == N_BINS:
        s_bar, *_ = np.linalg.lstsq(P, y, rcond=None)
    elif allow_ridge:
        s_bar = np.linalg.solve(P.T @ P + RIDGE_LAMBDA * np.eye(N_BINS), P.T @ y)
    else:
        raise DegenerateDesign("probability design matrix is rank deficient")
    return ReferenceValues(tuple(float(v) for v in s_bar))


def save_codec(path, scheme: BinningScheme, ref: ReferenceValues, source: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"cuts": list(scheme.cuts), "s_bar": list(ref.s_bar), "source": source,
           "lo": scheme.lo, "hi": scheme.hi}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def load_codec(path) -> tuple[BinningScheme, ReferenceValues, str]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    cuts = tuple(float(c) for c in doc["cuts"])
    scheme = BinningScheme(cuts=cuts, lo=float(doc.get("lo", cuts[0])), hi=float(doc.get("hi", cuts[-1])))
    return scheme, ReferenceValues(tuple(float(v) for v in doc["s_bar"])), doc.get("source", "")
