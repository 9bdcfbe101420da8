from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genkie.corpus import EntitySet
from genkie.prompt import (
    ALL_TYPES,
    EXTRACTION,
    LABELLING,
    QUESTION,
    TEMPLATE,
    PromptError,
    PromptSpec,
    build_prompt,
    build_target,
    expected_pairs,
    parse_entities,
    template_pieces,
)
from genkie.tokenizer import train_bpe
from strategies import spec_and_gold

SCHEMA = ("company", "address", "date", "total")
GOLD = EntitySet.from_pairs(
    [("company", "DAMAI HARDWARE"), ("address", "NO 175 JALAN SAGA"), ("date", "17/01/2016"), ("total", "16.69")]
)


def test_prompt_text():
    assert build_prompt(PromptSpec(EXTRACTION, QUESTION, SCHEMA, "company")) == "company is?"
    assert build_prompt(PromptSpec(EXTRACTION, TEMPLATE, SCHEMA, "date")) == "date is [SEP]"
    assert build_prompt(PromptSpec(LABELLING, TEMPLATE, SCHEMA, "16.69")) == "16.69 is [SEP]"
    assert build_prompt(PromptSpec(EXTRACTION, ALL_TYPES, ("company", "total"))) == "company is [SEP] total is [SEP]"


def test_targets():
    assert build_target(PromptSpec(EXTRACTION, QUESTION, SCHEMA, "total"), GOLD) == "16.69"
    assert build_target(PromptSpec(EXTRACTION, TEMPLATE, SCHEMA, "total"), GOLD) == "total is 16.69 [SEP]"
    assert build_target(PromptSpec(LABELLING, TEMPLATE, SCHEMA, "16.69"), GOLD) == "16.69 is total [SEP]"
    assert build_target(PromptSpec(LABELLING, QUESTION, SCHEMA, "16.69"), GOLD) == "total"
    partial = GOLD.without("date")
    assert (
        build_target(PromptSpec(EXTRACTION, ALL_TYPES, SCHEMA), partial)
        == "company is DAMAI HARDWARE [SEP] address is NO 175 JALAN SAGA [SEP] date is [SEP] total is 16.69 [SEP]"
    )
    with pytest.raises(PromptError):
        build_target(PromptSpec(EXTRACTION, TEMPLATE, SCHEMA, "date"), partial)
    with pytest.raises(PromptError):
        build_target(PromptSpec(LABELLING, TEMPLATE, SCHEMA, "nope"), GOLD)


@pytest.mark.parametrize(
    "args",
    [
        ("bogus", QUESTION, SCHEMA, "company"),
        (EXTRACTION, "bogus", SCHEMA, "company"),
        (EXTRACTION, QUESTION, SCHEMA, "phone"),
        (EXTRACTION, QUESTION, SCHEMA, "  "),
        (LABELLING, TEMPLATE, SCHEMA, "a [SEP] b"),
        (LABELLING, ALL_TYPES, SCHEMA, None),
        (EXTRACTION, ALL_TYPES, (), None),
    ],
)
def test_invalid_specs(args):
    with pytest.raises(PromptError):
        PromptSpec(*args)


def test_template_pieces():
    assert template_pieces(PromptSpec(EXTRACTION, QUESTION, SCHEMA, "date")) == []
    assert template_pieces(PromptSpec(EXTRACTION, TEMPLATE, SCHEMA, "date")) == ["date is"]
    assert template_pieces(PromptSpec(EXTRACTION, ALL_TYPES, SCHEMA)) == [f"{t} is" for t in SCHEMA]


def test_parse_degenerate_outputs_never_raise():
    spec = PromptSpec(EXTRACTION, ALL_TYPES, SCHEMA)
    out = parse_entities("", spec)
    assert len(out.pairs) == 0 and out.residue == ""
    out = parse_entities("garbage [SEP] total is 1.00 [SEP] total is 2.00", spec)
    assert out.pairs == EntitySet.from_pairs([("total", "2.00")])
    assert "garbage" in out.residue and "total is 1.00" in out.residue
    # an empty all-types slot yields no pair
    assert len(parse_entities("date is [SEP]", spec).pairs) == 0
    lab = PromptSpec(LABELLING, TEMPLATE, SCHEMA, "16.69")
    assert parse_entities("16.69 is", lab).residue == "16.69 is"


def test_longest_type_name_wins():
    spec = PromptSpec(EXTRACTION, ALL_TYPES, ("date", "time"))
    assert parse_entities("time is 17:12 [SEP]", spec).pairs == EntitySet.from_pairs([("time", "17:12")])


@settings(max_examples=300, deadline=None)
@given(spec_and_gold())
def test_roundtrip_property(draw):
    spec, gold = draw
    out = parse_entities(build_target(spec, gold), spec)
    assert out.pairs == gold and out.residue == ""


@pytest.fixture(scope="module")
def vocab():
    return train_bpe([" company is total address date DAMAI HARDWARE 16.69"], 300)


@settings(max_examples=100, deadline=None)
@given(spec_and_gold())
def test_roundtrip_through_token_ids(vocab, draw):
    spec, gold = draw
    text = vocab.decode_marked(vocab.encode_marked(build_target(spec, gold)))
    assert parse_entities(text, spec).pairs == gold


@settings(max_examples=200, deadline=None)
@given(spec_and_gold(), st.text(max_size=60))
def test_parse_total(draw, junk):
    spec, _ = draw
    parse_entities(junk, spec)  # never raises


def test_expected_pairs_order():
    spec = PromptSpec(EXTRACTION, ALL_TYPES, ("total", "company"))
    assert list(expected_pairs(spec, GOLD)) == [("total", "16.69"), ("company", "DAMAI HARDWARE")]
