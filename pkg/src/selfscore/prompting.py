"""Scoring prompt, score-conditioned prefixes and response parsing.

Responses follow a two-tag layout::

    #Score: 7
    #Explain: Strong composition.

Tags are matched case-insensitively and only their first occurrence counts.
When a text still carries the scoring prompt in front (as a conditioned
prefix does), the prompt is skipped before looking for tags, because the
prompt itself spells out the tags as a format description.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .errors import BinOutOfRange, FormatError

_SCORE_TAG = re.compile(r"#score:", re.IGNORECASE)
_EXPLAIN_TAG = re.compile(r"#explain:", re.IGNORECASE)
_SCORE_VALUE = re.compile(r"[ \t]*([^\s#]*)")
_INT = re.compile(r"[+-]?\d+")


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    """Read a prompt resource (``scoring`` or ``judge``) as exact text."""
    ref = resources.files("selfscore").joinpath("prompts", f"{name}.txt")
    return ref.read_bytes().decode("utf-8")


def render_scoring_prompt() -> str:
    return load_prompt("scoring")


def score_slot_prompt() -> str:
    """Prompt positioned right before the score token."""
    return render_scoring_prompt() + "\n#Score:"


def response_head(bin: int) -> str:
    _check_bin(bin)
    return f"#Score: {bin}\n#Explain:"


def render_conditioned_prefix(bin: int) -> str:
    """Scoring prompt followed by an injected score and the explanation tag.

    A backend continuing this text writes an explanation for ``bin``.
    """
    return render_scoring_prompt() + "\n" + response_head(bin)


def _check_bin(bin) -> None:
    if isinstance(bin, bool) or not isinstance(bin, int) or not 0 <= bin <= 9:
        raise BinOutOfRange(f"score bin must be an integer in 0..9, got {bin!r}")


@dataclass(frozen=True)
class ParsedResponse:
    score_bin: int
    explanation: str


def _body_start(text: str) -> int:
    prompt = render_scoring_prompt()
    return len(prompt) if text.startswith(prompt) else 0


def _locate(text: str) -> tuple[int, int, int, str]:
    """Return (score_start, score_end, bin, explanation) or raise FormatError."""
    start = _body_start(text)
    m = _SCORE_TAG.search(text, start)
    if m is None:
        raise FormatError("missing #Score: tag")
    v = _SCORE_VALUE.match(text, m.end())
    token = v.group(1)
    if not _INT.fullmatch(token):
        raise FormatError(f"non-integer score {token!r}")
    bin = int(token)
    if not 0 <= bin <= 9:
        raise FormatError(f"score {bin} outside 0..9")
    e = _EXPLAIN_TAG.search(text, v.end())
    if e is None:
        raise FormatError("missing #Explain: tag")
    explanation = text[e.end():].strip()
    if not explanation:
        raise FormatError("empty explanation")
    return v.start(1), v.end(1), bin, explanation


def parse_response(text: str) -> ParsedResponse:
    _, _, bin, explanation = _locate(text)
    return ParsedResponse(bin, explanation)


def replace_score_token(text: str, new_bin: int) -> str:
    """Swap the integer after the first ``#Score:``; every other byte is kept."""
    _check_bin(new_bin)
    start, end, _, _ = _locate(text)
    return text[:start] + str(new_bin) + text[end:]
