"""TIES merging of task vectors: trim, elect a sign per entry, disjoint mean.

All tie-breaks are independent of the order in which deltas are given.
Per-entry sums run over contributions sorted by value, so the merged
floats are bit-identical under any permutation of the inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._util import ceil_fraction, write_json
from .backend.base import NamedDelta, check_same_schema, delta_archive_checksum, load_delta, save_delta
from .errors import SchemaMismatch, ShapeMismatch

SIGN_METHODS = ("frequency", "mass")


@dataclass(frozen=True)
class MergeConfig:
    weights: tuple[float, ...] = (1.0, 1.0)
    density: float = 0.5
    sign_method: str = "frequency"

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.sign_method not in SIGN_METHODS:
            raise ValueError(f"sign_method must be one of {SIGN_METHODS}")
        if not self.weights or not all(math.isfinite(w) for w in self.weights):
            raise ValueError("weights must be a non-empty sequence of finite numbers")

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "density": self.density, "sign_method": self.sign_method}


def trim_array(x: np.ndarray, density: float) -> np.ndarray:
    """Keep the ``ceil(density * n)`` largest magnitudes; ties favour lower flat indices."""
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    flat = np.asarray(x, dtype=float).ravel()
    k = ceil_fraction(density, flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(np.shape(x))


def trim(delta: NamedDelta, density: float) -> NamedDelta:
    return NamedDelta({k: trim_array(v, density) for k, v in delta.entries.items()}, dict(delta.metadata))


def _sorted_sum(stack: np.ndarray) -> np.ndarray:
    """Sum along axis 0 after sorting, adding one row at a time."""
    s = np.sort(stack, axis=0)
    total = np.zeros(stack.shape[1:])
    for row in s:
        total = total + row
    return total


def elect_sign_arrays(arrays: Sequence[np.ndarray], method: str = "frequency") -> np.ndarray:
    stack = np.stack([np.asarray(a, dtype=float) for a in arrays])
    mass = np.sign(_sorted_sum(stack))
    nonzero = np.any(stack != 0, axis=0)
    if method == "frequency":
        pos = np.sum(stack > 0, axis=0)
        neg = np.sum(stack < 0, axis=0)
        sign = np.sign(pos - neg).astype(float)
        tied = sign == 0
        sign[tied] = mass[tied]
    elif method == "mass":
        sign = mass.copy()
    else:
        raise ValueError(f"sign method must be one of {SIGN_METHODS}")
    sign[(sign == 0) & nonzero] = 1.0
    sign[~nonzero] = 0.0
    return sign


def elect_sign(trimmed: Sequence[NamedDelta], method: str = "frequency") -> dict[str, np.ndarray]:
    """Per-entry sign in {-1, 0, +1} for every parameter."""
    _check_all(trimmed, ShapeMismatch)
    return {name: elect_sign_arrays([d.entries[name] for d in trimmed], method)
            for name in trimmed[0].names()}


def disjoint_merge_arrays(arrays: Sequence[np.ndarray], sign: np.ndarray,
                          weights: Sequence[float]) -> np.ndarray:
    stack = np.stack([np.asarray(a, dtype=float) for a in arrays])
    w = np.asarray(weights, dtype=float).reshape((-1,) + (1,) * (stack.ndim - 1))
    agree = (np.sign(stack) == sign) & (stack != 0)
    contrib = np.where(agree, w * stack, 0.0)
    count = agree.sum(axis=0)
    total = _sorted_sum(contrib)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def disjoint_merge(trimmed: Sequence[NamedDelta], signs: dict[str, np.ndarray],
                   weights: Sequence[float]) -> NamedDelta:
    _check_all(trimmed, ShapeMismatch)
    if len(weights) != len(trimmed):
        raise ValueError("one weight per delta is required")
    check_same_schema(trimmed[0].shapes(), {k: np.shape(v) for k, v in signs.items()}, ShapeMismatch)
    return NamedDelta({name: disjoint_merge_arrays([d.entries[name] for d in trimmed], signs[name], weights)
                       for name in trimmed[0].names()})


def _check_all(deltas: Sequence[NamedDelta], exc) -> None:
    if not deltas:
        raise ValueError("no deltas given")
    for d in deltas[1:]:
        check_same_schema(deltas[0].shapes(), d.shapes(), exc)


def ties_merge(deltas: Sequence[NamedDelta], config: MergeConfig = MergeConfig()) -> NamedDelta:
    if len(deltas) < 2:
        raise ValueError("merging needs at least two deltas")
    if len(config.weights) != len(deltas):
        raise ValueError(f"{len(config.weights)} weights given for {len(deltas)} deltas")
    _check_all(deltas, SchemaMismatch)
    trimmed = [trim(d, config.density) for d in deltas]
    signs = elect_sign(trimmed, config.sign_method)
    merged = disjoint_merge(trimmed, signs, config.weights)
    merged.metadata = {"merge": config.to_dict(),
                       "inputs": sorted(d.checksum() for d in deltas)}
    return merged


def _display_path(p, base) -> str:
    return str(Path(p).relative_to(base)) if base is not None else str(p)


def merge_archives(inputs: Sequence, out_dir, config: MergeConfig = MergeConfig(),
                   relative_to=None) -> Path:
    """Merge delta archives on disk and write the result plus ``merge_manifest.json``.

    Input paths are recorded relative to ``relative_to`` when given, so the
    manifest does not depend on where a run directory lives.
    """
    deltas = [load_delta(p) for p in inputs]
    merged = ties_merge(deltas, config)
    out = save_delta(merged, out_dir)
    write_json(out / "merge_manifest.json", {
        "config": config.to_dict(),
        "inputs": [{"path": _display_path(p, relative_to), "checksum": delta_archive_checksum(p)}
                   for p in inputs],
        "output_checksum": merged.checksum(),
    })
    return out
