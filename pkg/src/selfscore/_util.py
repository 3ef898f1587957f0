from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np


def ceil_fraction(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` with the fraction read as the decimal it prints as.

    Avoids 0.3 * 10 style round-up from binary floating point.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return math.ceil(Fraction(repr(float(fraction))) * n)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def child_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for a named stage, stable across runs and resumes."""
    words = [int(seed)]
    for k in keys:
        words.append(int(k) if isinstance(k, (int, np.integer)) else int(sha256_text(str(k))[:8], 16))
    return np.random.default_rng(np.random.SeedSequence(words))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
