import re
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from selfscore.errors import BinOutOfRange, FormatError
from selfscore.prompting import (load_prompt, parse_response, render_conditioned_prefix,
                                 render_scoring_prompt, replace_score_token, response_head,
                                 score_slot_prompt)

GOLDEN = Path(__file__).parent / "golden"
GOLDEN_SCORING = (GOLDEN / "scoring_prompt.txt").read_text(encoding="utf-8")
GOLDEN_JUDGE = (GOLDEN / "judge_prompt.txt").read_text(encoding="utf-8")
SOURCE_DOC = Path(__file__).resolve().parents[1] / "paper.md"


def test_scoring_prompt_golden():
    assert render_scoring_prompt().encode("utf-8") == GOLDEN_SCORING.encode("utf-8")
    assert render_scoring_prompt() == render_scoring_prompt()


def test_judge_prompt_golden():
    assert load_prompt("judge").encode("utf-8") == GOLDEN_JUDGE.encode("utf-8")


def test_scoring_prompt_fragments():
    text = render_scoring_prompt()
    assert "#Score: integer" in text.split("\n")
    assert "with 9 being the highest score and 4 to 5 indicating a mediocre image" in text


def _latex_to_text(block: str) -> str:
    """Independent transcription: forced breaks become newlines, other whitespace collapses."""
    block = re.sub(r"\\(small|footnotesize)\b", "", block)
    parts = re.split(r"\\\\", block)
    lines = []
    for p in parts:
        p = re.sub(r"\s+", " ", p).strip()
        p = p.replace(r"\#", "#").replace(r"\{", "{").replace(r"\}", "}")
        if p:
            lines.append(p)
    return "\n".join(lines)


@pytest.mark.skipif(not SOURCE_DOC.is_file(), reason="source document not in the checkout")
def test_prompts_match_source_listing():
    src = SOURCE_DOC.read_text(encoding="utf-8")
    blocks = re.findall(r"\\begin\{coloredquotation\}(.*?)\\end\{coloredquotation\}", src, re.S)
    texts = [_latex_to_text(b) for b in blocks]
    assert render_scoring_prompt() in texts
    assert load_prompt("judge") in texts


@pytest.mark.parametrize("b", [0, 6, 9])
def test_conditioned_prefix(b):
    p = render_conditioned_prefix(b)
    assert p.startswith(render_scoring_prompt())
    assert p.endswith(f"#Score: {b}\n#Explain:")
    assert response_head(b) == f"#Score: {b}\n#Explain:"


@pytest.mark.parametrize("b", [10, -1, 3.0, True, "5"])
def test_conditioned_prefix_out_of_range(b):
    with pytest.raises(BinOutOfRange):
        render_conditioned_prefix(b)


def test_score_slot_prompt():
    assert score_slot_prompt() == render_scoring_prompt() + "\n#Score:"


def test_parse_examples():
    r = parse_response("#Score: 7\n#Explain: Strong composition.")
    assert (r.score_bin, r.explanation) == (7, "Strong composition.")
    r = parse_response("#score:  3 \n#explain:  Flat lighting.")
    assert (r.score_bin, r.explanation) == (3, "Flat lighting.")
    with pytest.raises(FormatError):
        parse_response("#Score: ten\n#Explain: ...")


@pytest.mark.parametrize("text", [
    "no tags", "#Score: 4", "#Explain: only", "#Score: 12\n#Explain: x", "#Score: -1\n#Explain: x",
    "#Score: 4\n#Explain:   ", "#Score: 4.5\n#Explain: x", "#Score:\n#Explain: x",
])
def test_parse_failures(text):
    with pytest.raises(FormatError):
        parse_response(text)


def test_parse_first_occurrence_and_prompt_prefix():
    r = parse_response("#Score: 2\n#Explain: a #Score: 9 #Explain: b")
    assert r.score_bin == 2 and r.explanation == "a #Score: 9 #Explain: b"
    r = parse_response(render_conditioned_prefix(5) + " Balanced.")
    assert (r.score_bin, r.explanation) == (5, "Balanced.")


def test_replace_examples():
    assert replace_score_token("#Score: 2\n#Explain: Dull colors.", 6) == "#Score: 6\n#Explain: Dull colors."
    assert replace_score_token("#Score: 6\n#Explain: X", 6) == "#Score: 6\n#Explain: X"
    with pytest.raises(FormatError):
        replace_score_token("no tags", 4)


tag_free = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="#"), min_size=1).filter(
    lambda s: s.strip() and s == s.strip())


@given(st.integers(0, 9), tag_free)
def test_round_trip(b, e):
    r = parse_response(render_conditioned_prefix(b) + " " + e)
    assert (r.score_bin, r.explanation) == (b, e)


@given(st.integers(0, 9), st.integers(0, 9), tag_free)
def test_replace_then_parse(b, new, e):
    text = response_head(b) + " " + e
    out = replace_score_token(text, new)
    r = parse_response(out)
    assert r.score_bin == new and r.explanation == e
    assert out.split("#Explain:", 1)[1] == text.split("#Explain:", 1)[1]


@given(st.text(max_size=60))
def test_parse_never_out_of_range(text):
    try:
        r = parse_response(text)
    except FormatError:
        return
    assert 0 <= r.score_bin <= 9
