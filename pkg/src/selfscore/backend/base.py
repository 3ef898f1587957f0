"""Backend contract: generation, log-probabilities, score logits, adapter deltas."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, runtime_checkable

import numpy as np

from ..errors import ShapeMismatch


@dataclass(frozen=True)
class GenerationParams:
    decoding: str = "greedy"
    max_new_tokens: int = 256

    def __post_init__(self):
        if self.decoding != "greedy":
            raise ValueError("only greedy decoding is supported")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")


@dataclass(frozen=True)
class AdapterSpec:
    """Low-rank adapter setup; alpha is always twice the rank."""

    rank: int = 64
    target_scope: str = "all-linear"

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be a positive integer")

    @property
    def alpha(self) -> int:
        return 2 * self.rank

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "target_scope": self.target_scope}


@dataclass
class NamedDelta:
    """A task vector: dense per-parameter weight deltas plus provenance."""

    entries: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.entries.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"delta entry {name!r} has non-finite values")

    def names(self) -> list[str]:
        return sorted(self.entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.entries.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            arr = np.ascontiguousarray(self.entries[name])
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    def is_zero(self) -> bool:
        return all(not np.any(v) for v in self.entries.values())

    @classmethod
    def zeros(cls, shapes: Mapping[str, tuple[int, ...]], **metadata) -> "NamedDelta":
        return cls({k: np.zeros(s) for k, s in shapes.items()}, dict(metadata))


def check_same_schema(a: Mapping[str, tuple], b: Mapping[str, tuple], exc=ShapeMismatch) -> None:
    if set(a) != set(b):
        raise exc(f"parameter names differ: {sorted(set(a) ^ set(b))}")
    for k in a:
        if tuple(a[k]) != tuple(b[k]):
            raise exc(f"shape mismatch for {k!r}: {tuple(a[k])} vs {tuple(b[k])}")


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_delta(delta: NamedDelta, directory) -> Path:
    """Write ``manifest.json`` plus one raw little-endian file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = []
    for i, name in enumerate(delta.names()):
        arr = np.ascontiguousarray(delta.entries[name])
        dtype = arr.dtype.newbyteorder("<")
        fname = f"{i:04d}.bin"
        (directory / fname).write_bytes(arr.astype(dtype).tobytes())
        params.append({"name": name, "file": fname, "shape": list(arr.shape),
                       "dtype": dtype.str, "sha256": _file_sha256(directory / fname)})
    manifest = {"format": "named-delta/1", "metadata": delta.metadata,
                "params": params, "checksum": delta.checksum()}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_delta(directory, verify: bool = True) -> NamedDelta:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    entries = {}
    for p in manifest["params"]:
        path = directory / p["file"]
        if verify and _file_sha256(path) != p["sha256"]:
            raise ValueError(f"checksum mismatch for {p['name']!r} in {directory}")
        raw = np.frombuffer(path.read_bytes(), dtype=np.dtype(p["dtype"]))
        entries[p["name"]] = raw.reshape(p["shape"]).copy()
    return NamedDelta(entries, manifest.get("metadata", {}))


def delta_archive_checksum(directory) -> str:
    """Checksum recorded in an archive manifest, without loading the arrays."""
    return json.loads((Path(directory) / "manifest.json").read_text())["checksum"]


@runtime_checkable
class ScoringBackend(Protocol):
    """What a score-and-explain model must provide.

    A handle carries zero or one applied delta and optionally a trainable
    adapter on top. ``reference()`` returns the same model with neither.
    Real-VLM plug-ins implement this against their own runtime.
    """

    def generate(self, image_uri: str, prefix: str, params: GenerationParams = ...) -> str: ...

    def sequence_logprob(self, image_uri: str, prompt: str, response: str, mask: str = "all") -> float: ...

    def sequence_logprob_grad(self, image_uri: str, prompt: str, response: str,
                              mask: str = "all") -> tuple[float, dict[str, np.ndarray]]: ...

    def score_token_logits(self, image_uri: str, prompt: str) -> np.ndarray: ...

    def count_tokens(self, text: str) -> int: ...

    def attach_adapter(self, spec: AdapterSpec, seed: int = 0) -> None: ...

    def adapter_parameters(self) -> dict[str, np.ndarray]: ...

    def train_step(self, grads: Mapping[str, np.ndarray], optimizer) -> None: ...

    def export_delta(self) -> NamedDelta: ...

    def apply_delta(self, delta: NamedDelta | None) -> "ScoringBackend": ...

    def reference(self) -> "ScoringBackend": ...
