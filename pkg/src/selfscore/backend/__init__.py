from .base import (
    AdapterSpec,
    GenerationParams,
    NamedDelta,
    ScoringBackend,
    delta_archive_checksum,
    load_delta,
    save_delta,
)
from .toy import ToyJudge, ToyTokenizer, ToyVLM, ToyWeights, make_toy_task, tier_of_bin, tier_of_text

__all__ = [
    "AdapterSpec", "GenerationParams", "NamedDelta", "ScoringBackend",
    "delta_archive_checksum", "load_delta", "save_delta",
    "ToyJudge", "ToyTokenizer", "ToyVLM", "ToyWeights", "make_toy_task",
    "tier_of_bin", "tier_of_text",
]
