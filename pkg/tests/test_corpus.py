from __future__ import annotations

import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genkie.corpus import (
    ConfigError,
    DatasetError,
    Document,
    EntitySet,
    Raster,
    Segment,
    corrupt_word,
    default_confusion_table,
    doc_from_json,
    doc_to_json,
    generate_corpus,
    inject_ocr_noise,
    read_confusion_table,
    read_dataset,
    read_pgm,
    render_image,
    validate_table,
    write_confusion_table,
    write_dataset,
    write_pgm,
)

SCHEMA = ("company", "address", "date", "total")


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SCHEMA, 2000, 1)


def test_single_document_has_schema_pairs():
    (doc,) = generate_corpus(SCHEMA, 1, 7)
    assert [t for t, _ in doc.entities] == list(SCHEMA)
    assert len(doc.segments) >= 4
    # every entity lives in its own labelled segment(s)
    for t, v in doc.entities:
        labelled = [s.text for s in doc.segments if s.label == t]
        assert " ".join(labelled) == v


def test_generation_is_deterministic():
    a = generate_corpus(SCHEMA, 20, 3)
    b = generate_corpus(SCHEMA, 20, 3)
    assert [json.dumps(doc_to_json(d)) for d in a] == [json.dumps(doc_to_json(d)) for d in b]
    c = generate_corpus(SCHEMA, 20, 4)
    assert [doc_to_json(d) for d in a] != [doc_to_json(d) for d in c]


def test_prefix_stability_of_generation():
    # document i depends only on (seed, i)
    assert doc_to_json(generate_corpus(SCHEMA, 5, 2)[3]) == doc_to_json(generate_corpus(SCHEMA, 9, 2)[3])


@pytest.mark.parametrize("schema", [(), ("company", "nonsense"), ("date", "date")])
def test_bad_schema_rejected(schema):
    with pytest.raises(ConfigError):
        generate_corpus(schema, 3, 0)


def test_bad_rates_rejected():
    with pytest.raises(ConfigError):
        generate_corpus(SCHEMA, 3, 0, dup_rate=0.6, layout_pair_rate=0.6)
    with pytest.raises(ConfigError):
        generate_corpus(SCHEMA, 0, 0)


def _duplicated_in_two_roles(doc: Document) -> bool:
    """Independent scan: some segment text occurs in >= 2 segments with different labels."""
    roles: dict[str, set[str]] = {}
    for s in doc.segments:
        roles.setdefault(s.text, set()).add(s.label)
    return any(len(r) >= 2 for r in roles.values())


def test_semantic_ambiguity_rate(corpus):
    n = sum(_duplicated_in_two_roles(d) for d in corpus)
    assert n >= 200, n


def test_segments_inside_page(corpus):
    for d in corpus[:200]:
        for s in d.segments:
            x0, y0, x1, y1 = s.bbox
            assert 0 <= x0 <= x1 <= d.page_width and 0 <= y0 <= y1 <= d.page_height


def test_segment_and_entity_invariants():
    with pytest.raises(ValueError):
        Segment("x", (5, 0, 4, 3))
    with pytest.raises(ValueError):
        Segment("", (0, 0, 1, 1))
    with pytest.raises(ValueError):
        Document("d", 10, 10, [Segment("x", (0, 0, 11, 5))], EntitySet())
    es = EntitySet.from_pairs([("a", "1"), ("b", "2")])
    assert es.types() == ["a", "b"] and es.get("b") == "2" and es.get("c") is None
    assert list(es.without("a")) == [("b", "2")]


# ---------------------------------------------------------------------------
# rendering


def test_render_blank_and_deterministic(corpus):
    blank = Document("e", 100, 100, [], EntitySet())
    r = render_image(blank)
    assert (r.width, r.height) == (480, 480) and (r.pixels == 255).all()
    assert render_image(corpus[0]) == render_image(corpus[0])


def test_render_single_segment_stays_inside_box():
    doc = Document("one", 200, 100, [Segment("AB12", (40, 20, 120, 50))], EntitySet())
    r = render_image(doc, (200, 100))
    ink = np.argwhere(r.pixels < 255)
    assert len(ink) > 0
    assert ink[:, 0].min() >= 20 and ink[:, 0].max() < 50
    assert ink[:, 1].min() >= 40 and ink[:, 1].max() < 120


def test_zero_area_segment_skipped(caplog):
    doc = Document("z", 100, 100, [Segment("x", (10, 10, 10, 20))], EntitySet())
    r = render_image(doc)
    assert (r.pixels == 255).all()
    assert "zero-area" in caplog.text


def test_pgm_roundtrip(tmp_path, corpus):
    r = render_image(corpus[1])
    write_pgm(r, tmp_path / "a.pgm")
    assert read_pgm(tmp_path / "a.pgm") == r
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(DatasetError):
        read_pgm(tmp_path / "b.pgm")


def test_raster_shape_checked():
    with pytest.raises(ValueError):
        Raster(3, 2, np.zeros((3, 2), dtype=np.uint8))


# ---------------------------------------------------------------------------
# OCR noise


def test_hello_worked_example():
    rng = random.Random(0)
    out = corrupt_word("hello", {"l": ["1"]}, rng)
    # both l's are candidates; at least one is replaced, each with p=0.5
    assert out in {"he1lo", "hel1o", "he11o"}
    seen = {corrupt_word("hello", {"l": ["1"]}, random.Random(s)) for s in range(200)}
    assert "he11o" in seen


def test_word_without_replaceable_chars_unchanged():
    assert corrupt_word("xyz", default_confusion_table(), random.Random(1)) == "xyz"


def test_multi_char_key():
    assert corrupt_word("rn", {"rn": ["m"]}, random.Random(0)) == "m"


def test_level_zero_identity(corpus):
    table = default_confusion_table()
    for d in corpus[:100]:
        assert doc_to_json(inject_ocr_noise(d, 0, table, 5)) == doc_to_json(d)


def test_noise_leaves_entities_boxes_images(corpus):
    table = default_confusion_table()
    for d in corpus[:50]:
        n = inject_ocr_noise(d, 50, table, 3)
        assert n.entities == d.entities
        assert [s.bbox for s in n.segments] == [s.bbox for s in d.segments]
        assert [s.label for s in n.segments] == [s.label for s in d.segments]
        assert n.marks == d.marks and n.image is d.image
        assert all(len(a.text.split(" ")) == len(b.text.split(" ")) for a, b in zip(n.segments, d.segments))


def test_noise_deterministic_and_seeded(corpus):
    table = default_confusion_table()
    d = corpus[5]
    assert doc_to_json(inject_ocr_noise(d, 40, table, 9)) == doc_to_json(inject_ocr_noise(d, 40, table, 9))
    outs = {tuple(inject_ocr_noise(d, 40, table, s).transcript) for s in range(10)}
    assert len(outs) > 1


def _changed_words(a: Document, b: Document) -> int:
    return sum(x != y for sa, sb in zip(a.segments, b.segments) for x, y in zip(sa.text.split(" "), sb.text.split(" ")))


def test_noise_monotone_in_level(corpus):
    table = default_confusion_table()
    counts = [sum(_changed_words(d, inject_ocr_noise(d, lv, table, 1)) for d in corpus[:300]) for lv in (0, 10, 30, 60, 100)]
    assert counts == sorted(counts) and counts[0] == 0


def test_noise_level_bounds(corpus):
    with pytest.raises(ValueError):
        inject_ocr_noise(corpus[0], 101, default_confusion_table(), 0)


def test_empty_table_is_identity(corpus):
    assert inject_ocr_noise(corpus[0], 100, {}, 0).transcript == corpus[0].transcript


def test_confusion_table_io(tmp_path):
    t = default_confusion_table()
    assert all(src not in dsts for src, dsts in t.items())
    assert "0" in t["o"] and "o" in t["0"] and "m" in t["rn"]
    write_confusion_table(t, tmp_path / "t.tsv")
    assert read_confusion_table(tmp_path / "t.tsv") == t
    (tmp_path / "bad.tsv").write_text("a a\n")
    with pytest.raises(DatasetError):
        read_confusion_table(tmp_path / "bad.tsv")
    with pytest.raises(DatasetError):
        validate_table({"a": ["a"]})


# ---------------------------------------------------------------------------
# dataset IO


def test_dataset_roundtrip(tmp_path, corpus):
    write_dataset(tmp_path / "d.jsonl", corpus[:50])
    back = read_dataset(tmp_path / "d.jsonl")
    assert [doc_to_json(d) for d in back] == [doc_to_json(d) for d in corpus[:50]]
    write_dataset(tmp_path / "e.jsonl", [])
    assert read_dataset(tmp_path / "e.jsonl") == []


def test_sroie_style_line_parses(tmp_path):
    line = {
        "id": "X51005200938",
        "segments": [
            {"text": "PERNIAGAAN ZHENG HUI", "bbox": [50, 20, 380, 45]},
            {"text": "NO.59 JALAN PERMAS 9/5", "bbox": [60, 60, 360, 80]},
            {"text": "BANDAR BARU PERMAS JAYA", "bbox": [60, 85, 360, 105]},
            {"text": "DATE : 10/02/2018", "bbox": [40, 200, 300, 220]},
            {"text": "TOTAL 112.45", "bbox": [40, 400, 300, 420]},
        ],
        "entities": [
            {"type": "company", "value": "PERNIAGAAN ZHENG HUI"},
            {"type": "address", "value": "NO.59 JALAN PERMAS 9/5 BANDAR BARU PERMAS JAYA"},
            {"type": "date", "value": "10/02/2018"},
            {"type": "total", "value": "112.45"},
        ],
        "image": "X51005200938.jpg",
    }
    (tmp_path / "s.jsonl").write_text(json.dumps(line) + "\n")
    (doc,) = read_dataset(tmp_path / "s.jsonl")
    assert len(doc.entities) == 4
    assert doc.entities.get("total") == "112.45"
    assert (doc.page_width, doc.page_height) == (380, 420)


def test_malformed_line_names_line_number(tmp_path, corpus):
    write_dataset(tmp_path / "d.jsonl", corpus[:2])
    with open(tmp_path / "d.jsonl", "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(DatasetError, match="line 3"):
        read_dataset(tmp_path / "d.jsonl")


_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(_text, st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50)), max_size=5),
    st.lists(st.tuples(st.sampled_from(SCHEMA), _text), max_size=4),
)
def test_json_roundtrip_property(segs, ents):
    segments = [Segment(t, (min(a, b), min(c, d), max(a, b), max(c, d))) for t, a, b, c, d in segs]
    doc = Document("p", 60, 60, segments, EntitySet.from_pairs(ents))
    back = doc_from_json(json.loads(json.dumps(doc_to_json(doc))))
    assert doc_to_json(back) == doc_to_json(doc)
