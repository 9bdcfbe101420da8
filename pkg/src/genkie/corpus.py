"""Synthetic receipts, raster rendering, OCR noise and the JSONL dataset format."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

RawBox = tuple[int, int, int, int]

DEFAULT_TARGET = (480, 480)
KNOWN_TYPES = ("company", "address", "date", "total", "phone", "time")
OTHER = "other"


class ConfigError(ValueError):
    """Invalid generator or harness configuration."""


class DatasetError(ValueError):
    """A dataset or table file could not be parsed."""


@dataclass(frozen=True)
class Segment:
    text: str
    bbox: RawBox
    label: str = OTHER

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if x0 > x1 or y0 > y1:
            raise ValueError(f"inverted bbox {self.bbox}")
        if not self.text:
            raise ValueError("segment text must be non-empty")


@dataclass(frozen=True)
class EntitySet:
    pairs: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> EntitySet:
        return cls(tuple((str(t), str(v)) for t, v in pairs))

    def types(self) -> list[str]:
        seen: list[str] = []
        for t, _ in self.pairs:
            if t not in seen:
                seen.append(t)
        return seen

    def values(self, entity_type: str) -> list[str]:
        return [v for t, v in self.pairs if t == entity_type]

    def get(self, entity_type: str) -> str | None:
        vals = self.values(entity_type)
        return vals[0] if vals else None

    def without(self, entity_type: str) -> EntitySet:
        return EntitySet(tuple(p for p in self.pairs if p[0] != entity_type))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


@dataclass
class Raster:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width), 255 = paper

    def __post_init__(self) -> None:
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixel grid {self.pixels.shape} does not match {self.height}x{self.width}"
            )

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Raster)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass
class Document:
    id: str
    page_width: int
    page_height: int
    segments: list[Segment]
    entities: EntitySet
    image: Raster | None = None
    image_path: str | None = None
    # Non-text print (logos). Visible in the image, never transcribed.
    marks: list[RawBox] = field(default_factory=list)

    def __post_init__(self) -> None:
        for seg in self.segments:
            x0, y0, x1, y1 = seg.bbox
            if x0 < 0 or y0 < 0 or x1 > self.page_width or y1 > self.page_height:
                raise ValueError(f"segment {seg.text!r} bbox {seg.bbox} outside page")

    @property
    def transcript(self) -> list[str]:
        return [s.text for s in self.segments]


# ---------------------------------------------------------------------------
# Generator

_NAME_WORDS = """
YONG FATT SINAR JAYA MAJU KEDAI BESTARI SENTOSA MEGAH RIA CAHAYA HARMONI SRI
MUTIARA INDAH PERDANA GEMILANG SETIA MURNI LESTARI BUDI ANEKA TIMUR BARAT EMAS
PERAK BINTANG BULAN SURIA LAUT GUNUNG DESA KOTA BANDAR PUTRA SENI WAWASAN
RAKYAT SUBUR BAHAGIA DAMAI HOCK SENG LEONG HUAT KHOO LIAN TECK CHUAN HENG
WING BOON KIAT GOLDEN ORIENT PACIFIC ROYAL UNITED GLOBAL CITY STAR MODERN
""".split()

_NAME_SUFFIXES = [
    "SDN BHD", "ENTERPRISE", "TRADING", "HARDWARE", "BOOK STORE", "RESTORAN",
    "STATIONERY", "MINI MARKET", "PHARMACY", "(M) SDN BHD", "BAKERY", "MOTOR",
]

_LOCALITIES = [
    "DAYAN", "MOLEK", "UNIVERSITI", "SKUDAI", "PELANGI", "DESA JAYA", "MEWAH",
    "SETIA INDAH", "BUKIT INDAH", "NUSA BESTARI", "PERLING", "JOHOR JAYA",
    "MUTIARA RINI", "IMPIAN", "CONNAUGHT", "MELAWATI", "SRI PETALING", "DATO ONN",
]
_STREETS = [
    "DEDAP", "MERANTI", "KENANGA", "CEMPAKA", "ROS", "MAWAR", "SAGA", "BAKAWALI",
    "PERMAS", "TUN RAZAK", "AMPANG", "IPOH", "KLANG LAMA", "SULTAN ISMAIL",
]
_CITIES = [
    ("81100", "JOHOR BAHRU"), ("81300", "SKUDAI"), ("50450", "KUALA LUMPUR"),
    ("47301", "PETALING JAYA"), ("40000", "SHAH ALAM"), ("30450", "IPOH"),
    ("10200", "GEORGETOWN"), ("80150", "JOHOR BAHRU"), ("56000", "CHERAS"),
]
_STATES = ["JOHOR", "SELANGOR", "PERAK", "PULAU PINANG", "W P KUALA LUMPUR"]
_ITEMS = [
    "MILO 1KG", "GARDENIA BREAD", "BIC PEN", "A4 PAPER", "MINERAL WATER",
    "TEH TARIK", "NASI LEMAK", "ROTI CANAI", "KOPI O", "MEE GORENG", "STAPLER",
    "GLUE STICK", "SCREW 2IN", "PAINT BRUSH", "BATTERY AA", "SUGAR 1KG",
    "FILE FOLDER", "ENVELOPE", "TAPE 18MM", "CHICKEN RICE", "ICE LEMON TEA",
]
_TOTAL_LABELS = ["TOTAL", "TOTAL AMOUNT", "GRAND TOTAL", "NETT TOTAL", "TOTAL (RM)"]
_FOOTERS = ["THANK YOU", "PLEASE COME AGAIN", "GOODS SOLD ARE NOT RETURNABLE"]

NORMAL_H = 20
LARGE_H = 30
CHAR_W = {NORMAL_H: 12, LARGE_H: 17}
MARGIN = 30
LOGO = 30
HEADER_Y = MARGIN + LOGO + 12


def _company_name(rng: random.Random) -> str:
    while True:
        words = rng.sample(_NAME_WORDS, rng.choice([1, 2, 2, 3]))
        name = " ".join(words + [rng.choice(_NAME_SUFFIXES)])
        if len(name) <= 20:
            return name


class _Page:
    def __init__(self, rng: random.Random, width: int) -> None:
        self.rng = rng
        self.width = width
        self.y = HEADER_Y
        self.segments: list[Segment] = []
        self.marks: list[RawBox] = []

    def _jy(self) -> int:
        return self.rng.randint(-3, 3)

    def _jx(self) -> int:
        return self.rng.randint(0, 10)

    @staticmethod
    def text_width(text: str, h: int) -> int:
        return len(text) * CHAR_W[h]

    def place(self, text: str, x0: int, y0: int, h: int, label: str) -> Segment:
        w = self.text_width(text, h)
        x0 = max(0, min(x0, self.width - w))
        seg = Segment(text, (x0, y0, x0 + w, y0 + h), label)
        self.segments.append(seg)
        return seg

    def row(self, items: Sequence[tuple[str, str, str]], h: int = NORMAL_H) -> list[Segment]:
        """Place (text, label, align) items on one line; align in left|right|center."""
        y0 = self.y + self._jy()
        out = []
        for text, label, align in items:
            w = self.text_width(text, h)
            if align == "left":
                x0 = MARGIN + self._jx()
            elif align == "right":
                x0 = self.width - MARGIN - w - self._jx()
            elif align == "mid":
                x0 = self.width // 2 - w // 2 + self.rng.randint(-10, 10)
            else:
                x0 = (self.width - w) // 2 + self.rng.randint(-15, 15)
            out.append(self.place(text, x0, max(0, y0), h, label))
        self.y += h + 14
        return out


def _header(page: _Page, company: str, kind: str, rng: random.Random) -> None:
    if kind == "plain":
        (seg,) = page.row([(company, "company", "center")], h=LARGE_H)
        if rng.random() < 0.3:
            cx = (seg.bbox[0] + seg.bbox[2]) // 2
            page.marks.append((cx - LOGO // 2, MARGIN, cx + LOGO // 2, MARGIN + LOGO))
        return
    decoy = _company_name(rng)
    while decoy == company:
        decoy = _company_name(rng)
    company_left = rng.random() < 0.5
    names = [(company, "company"), (decoy, OTHER)]
    if not company_left:
        names.reverse()
    y0 = page.y + page._jy()
    segs = []
    for (text, label), side in zip(names, ("left", "right")):
        # layout pairs: only the company is printed large; visual pairs: both large
        h = LARGE_H if (kind == "visual" or label == "company") else NORMAL_H
        w = page.text_width(text, h)
        x0 = MARGIN + page._jx() if side == "left" else page.width - MARGIN - w - page._jx()
        segs.append(page.place(text, x0, y0, h, label))
    if kind == "visual":
        seg = segs[0] if company_left else segs[1]
        cx = (seg.bbox[0] + seg.bbox[2]) // 2
        page.marks.append((cx - LOGO // 2, MARGIN, cx + LOGO // 2, MARGIN + LOGO))
    page.y += LARGE_H + 14


def _amount(rng: random.Random, lo: float, hi: float) -> float:
    return round(rng.uniform(lo, hi), 2)


def _one_document(
    idx: int, rng: random.Random, schema: Sequence[str], rates: dict[str, float]
) -> Document:
    page = _Page(rng, rng.randint(800, 880))
    u = rng.random()
    kind = "plain"
    if u < rates["dup"]:
        kind = "dup"
    elif u < rates["dup"] + rates["layout_pair"]:
        kind = "layout"
    elif u < rates["dup"] + rates["layout_pair"] + rates["visual_pair"]:
        kind = "visual"

    locality = "TAMAN " + rng.choice(_LOCALITIES)
    company = locality if kind == "dup" else _company_name(rng)
    _header(page, company, "plain" if kind in ("plain", "dup") else kind, rng)

    postcode, city = rng.choice(_CITIES)
    address_lines = [f"NO {rng.randint(1, 199)}", f"JALAN {rng.choice(_STREETS)} {rng.randint(1, 30)}"]
    if kind == "dup" or rng.random() < 0.7:
        address_lines.append(locality)
    address_lines.append(f"{postcode} {city}")
    if rng.random() < 0.5:
        address_lines.append(rng.choice(_STATES))
    # pack address words onto 2-3 printed lines
    n_lines = min(len(address_lines), rng.choice([2, 3, 3]))
    if kind == "dup":
        # the shared locality string must be a whole segment of its own
        lines = [" ".join(address_lines[:2]), locality, " ".join(address_lines[3:])]
        lines = [ln for ln in lines if ln]
    else:
        per = -(-len(address_lines) // n_lines)
        lines = [" ".join(address_lines[i:i + per]) for i in range(0, len(address_lines), per)]
    for ln in lines:
        page.row([(ln, "address", "left")])

    phone = f"0{rng.randint(3, 9)}-{rng.randint(2000000, 9999999)}"
    page.row([("TEL", OTHER, "left"), (phone, "phone", "right")])
    page.row([("INVOICE NO", OTHER, "left"), (f"CS{rng.randint(10000, 99999):08d}", OTHER, "right")])
    d, m, yv = rng.randint(1, 28), rng.randint(1, 12), rng.randint(2015, 2019)
    date = rng.choice([f"{d:02d}/{m:02d}/{yv}", f"{d:02d}-{m:02d}-{yv}"])
    time = f"{rng.randint(8, 21):02d}:{rng.randint(0, 59):02d}"
    page.row([("DATE", OTHER, "left"), (date, "date", "mid"), (time, "time", "right")])

    subtotal = 0.0
    for item in rng.sample(_ITEMS, rng.randint(1, 4)):
        price = _amount(rng, 1, 60)
        subtotal += price
        page.row([(item, OTHER, "left"), (f"{price:.2f}", OTHER, "right")])
    subtotal = round(subtotal, 2)
    total = subtotal if rng.random() < 0.3 else round(subtotal + rng.choice([-0.02, -0.01, 0.01, 0.02, 1.5]), 2)
    total = max(total, 0.01)
    page.row([("SUBTOTAL", OTHER, "left"), (f"{subtotal:.2f}", OTHER, "right")])
    page.row([(rng.choice(_TOTAL_LABELS), OTHER, "left"), (f"{total:.2f}", "total", "right")])
    cash = float(np.ceil(total / 10.0) * 10.0) if rng.random() < 0.7 else total
    page.row([("CASH", OTHER, "left"), (f"{cash:.2f}", OTHER, "right")])
    page.row([("CHANGE", OTHER, "left"), (f"{cash - total:.2f}", OTHER, "right")])
    page.row([(rng.choice(_FOOTERS), OTHER, "center")])

    height = page.y + MARGIN + rng.randint(0, 60)
    values = {
        "company": company,
        "address": " ".join(lines),
        "date": date,
        "total": f"{total:.2f}",
        "phone": phone,
        "time": time,
    }
    keep = set(schema)
    segments = [s if s.label in keep else replace(s, label=OTHER) for s in page.segments]
    entities = EntitySet.from_pairs((t, values[t]) for t in schema)
    return Document(
        id=f"doc{idx:05d}",
        page_width=page.width,
        page_height=height,
        segments=segments,
        entities=entities,
        marks=page.marks,
    )


def generate_corpus(
    schema: Sequence[str],
    n_docs: int,
    seed: int,
    *,
    dup_rate: float = 0.15,
    layout_pair_rate: float = 0.15,
    visual_pair_rate: float = 0.15,
) -> list[Document]:
    """Generate ``n_docs`` synthetic receipts deterministically from ``seed``.

    Besides plain receipts the generator mixes in three ambiguity patterns:

    * ``dup``: the company is named after the locality that is also a line of
      the address, so one string appears in two segments with two roles;
    * ``layout_pair``: the header holds the company and a decoy name side by
      side (random order), only the company is printed in the large font;
    * ``visual_pair``: as above with equal fonts; a logo printed above the
      company is the only cue, and it is visible only in the image.
    """
    if not schema:
        raise ConfigError("schema must name at least one entity type")
    unknown = [t for t in schema if t not in KNOWN_TYPES]
    if unknown:
        raise ConfigError(f"unknown entity types {unknown}; known: {KNOWN_TYPES}")
    if len(set(schema)) != len(schema):
        raise ConfigError("schema has duplicate types")
    if n_docs < 1:
        raise ConfigError("n_docs must be >= 1")
    rates = {"dup": dup_rate, "layout_pair": layout_pair_rate, "visual_pair": visual_pair_rate}
    if any(r < 0 for r in rates.values()) or sum(rates.values()) > 1:
        raise ConfigError(f"ambiguity rates must be >= 0 and sum to <= 1, got {rates}")
    docs = []
    for i in range(n_docs):
        rng = random.Random(f"corpus:{seed}:{i}")
        docs.append(_one_document(i, rng, schema, rates))
    return docs


# ---------------------------------------------------------------------------
# Rendering

def _glyph_extent(ch: str) -> tuple[float, float]:
    """Vertical extent (top, bottom) of a glyph block as fractions of line height."""
    if ch.isdigit():
        return 0.15, 1.0
    if ch.isupper():
        return 0.0, 1.0
    if ch.islower():
        return 0.35, 1.0
    return 0.6, 0.85


def render_image(doc: Document, target: tuple[int, int] = DEFAULT_TARGET) -> Raster:
    """Rasterize segments as glyph blocks (and marks as solid squares) at ``target``."""
    tw, th = target
    px = np.full((th, tw), 255, dtype=np.uint8)
    sx = tw / doc.page_width
    sy = th / doc.page_height

    for x0, y0, x1, y1 in doc.marks:
        r0, r1 = int(y0 * sy), max(int(y1 * sy), int(y0 * sy) + 1)
        c0, c1 = int(x0 * sx), max(int(x1 * sx), int(x0 * sx) + 1)
        px[r0:r1, c0:c1] = 0

    for seg in doc.segments:
        x0, y0, x1, y1 = seg.bbox
        if x1 <= x0 or y1 <= y0:
            log.warning("skipping zero-area segment %r in %s", seg.text, doc.id)
            continue
        cw = (x1 - x0) / len(seg.text)
        for k, ch in enumerate(seg.text):
            if ch.isspace():
                continue
            top, bot = _glyph_extent(ch)
            gx0 = x0 + k * cw + 0.1 * cw
            gx1 = x0 + (k + 1) * cw - 0.1 * cw
            gy0 = y0 + top * (y1 - y0)
            gy1 = y0 + bot * (y1 - y0)
            c0 = int(gx0 * sx)
            c1 = max(int(np.ceil(gx1 * sx)), c0 + 1)
            r0 = int(gy0 * sy)
            r1 = max(int(np.ceil(gy1 * sy)), r0 + 1)
            px[r0:min(r1, th), c0:min(c1, tw)] = 0 if ch.isalnum() else 96
    return Raster(tw, th, px)


def write_pgm(raster: Raster, path: str | Path) -> None:
    header = f"P5\n{raster.width} {raster.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + raster.pixels.tobytes())


def read_pgm(path: str | Path) -> Raster:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise DatasetError(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()
    return Raster(w, h, pixels)


# ---------------------------------------------------------------------------
# OCR noise

ConfusionTable = dict[str, list[str]]

_DEFAULT_PAIRS = [
    ("o", "0"), ("O", "0"), ("l", "1"), ("I", "1"), ("S", "5"), ("B", "8"),
    ("Z", "2"), ("rn", "m"), ("D", "O"), ("e", "c"),
]


def _table_from_pairs(pairs: Iterable[tuple[str, str]]) -> ConfusionTable:
    table: ConfusionTable = {}
    for a, b in pairs:
        for src, dst in ((a, b), (b, a)):
            table.setdefault(src, [])
            if dst not in table[src]:
                table[src].append(dst)
    return table


def default_confusion_table() -> ConfusionTable:
    """Symmetric visually-similar character table (o/0, l/1, S/5, B/8, rn/m, ...)."""
    return _table_from_pairs(_DEFAULT_PAIRS)


def validate_table(table: ConfusionTable) -> ConfusionTable:
    for src, dsts in table.items():
        if not src:
            raise DatasetError("confusion table has an empty key")
        if src in dsts:
            raise DatasetError(f"confusion table maps {src!r} to itself")
        if any(not d or any(c.isspace() for c in d) for d in dsts):
            raise DatasetError(f"confusion table entry for {src!r} has an empty/whitespace replacement")
    return table


def read_confusion_table(path: str | Path) -> ConfusionTable:
    """Parse ``char TAB replacements`` lines; replacements are space-separated."""
    table: ConfusionTable = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" not in line:
            raise DatasetError(f"{path}:{n}: expected 'char<TAB>replacements'")
        src, rest = line.split("\t", 1)
        reps = rest.split()
        if not reps:
            raise DatasetError(f"{path}:{n}: no replacements for {src!r}")
        table.setdefault(src, []).extend(r for r in reps if r not in table.get(src, []))
    return validate_table(table)


def write_confusion_table(table: ConfusionTable, path: str | Path) -> None:
    lines = [f"{src}\t{' '.join(dsts)}" for src, dsts in table.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _replaceable_spans(word: str, table: ConfusionTable) -> list[tuple[int, int]]:
    """Greedy longest-match spans of ``word`` that have a table entry."""
    keys = sorted(table, key=len, reverse=True)
    spans = []
    i = 0
    while i < len(word):
        for k in keys:
            if word.startswith(k, i):
                spans.append((i, i + len(k)))
                i += len(k)
                break
        else:
            i += 1
    return spans


def corrupt_word(word: str, table: ConfusionTable, rng: random.Random) -> str:
    """Replace each replaceable span with p=0.5, forcing at least one replacement."""
    spans = _replaceable_spans(word, table)
    if not spans:
        return word
    chosen = [s for s in spans if rng.random() < 0.5]
    if not chosen:
        chosen = [spans[rng.randrange(len(spans))]]
    out = []
    last = 0
    for a, b in chosen:
        out.append(word[last:a])
        out.append(rng.choice(table[word[a:b]]))
        last = b
    out.append(word[last:])
    return "".join(out)


def corrupt_text(text: str, p: float, table: ConfusionTable, select: random.Random, edit: random.Random) -> str:
    words = text.split(" ")
    out = []
    for w in words:
        # one selection draw per word regardless of outcome keeps levels coupled
        if select.random() < p and w:
            w = corrupt_word(w, table, edit)
        out.append(w)
    return " ".join(out)


def inject_ocr_noise(doc: Document, level_pct: int, table: ConfusionTable, seed: int) -> Document:
    """Corrupt transcript words with probability ``level_pct``/100; entities and image untouched."""
    if not 0 <= level_pct <= 100:
        raise ValueError(f"level_pct must be in [0, 100], got {level_pct}")
    if level_pct == 0 or not table:
        return replace(doc, segments=list(doc.segments))
    p = level_pct / 100.0
    select = random.Random(f"noise-select:{seed}:{doc.id}")
    edit = random.Random(f"noise-edit:{seed}:{doc.id}")
    segs = [replace(s, text=corrupt_text(s.text, p, table, select, edit)) for s in doc.segments]
    return replace(doc, segments=segs)


# ---------------------------------------------------------------------------
# JSONL dataset

def doc_to_json(doc: Document) -> dict:
    return {
        "id": doc.id,
        "page_width": doc.page_width,
        "page_height": doc.page_height,
        "segments": [{"text": s.text, "bbox": list(s.bbox), "label": s.label} for s in doc.segments],
        "entities": [{"type": t, "value": v} for t, v in doc.entities],
        "image": doc.image_path,
        "marks": [list(m) for m in doc.marks],
    }


def doc_from_json(obj: dict) -> Document:
    segments = [
        Segment(str(s["text"]), tuple(int(c) for c in s["bbox"]), str(s.get("label", OTHER)))
        for s in obj["segments"]
    ]
    width = obj.get("page_width")
    height = obj.get("page_height")
    if width is None or height is None:
        # SROIE-style lines carry no page size; use the box extent
        width = max([s.bbox[2] for s in segments] + [1])
        height = max([s.bbox[3] for s in segments] + [1])
    return Document(
        id=str(obj["id"]),
        page_width=int(width),
        page_height=int(height),
        segments=segments,
        entities=EntitySet.from_pairs((e["type"], e["value"]) for e in obj["entities"]),
        image_path=obj.get("image"),
        marks=[tuple(int(c) for c in m) for m in obj.get("marks", [])],
    )


def write_dataset(path: str | Path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc_to_json(doc), ensure_ascii=False) + "\n")


def read_dataset(path: str | Path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                docs.append(doc_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: line {n}: {exc}") from exc
    return docs


def load_image(doc: Document, base: str | Path | None = None, target: tuple[int, int] = DEFAULT_TARGET) -> Raster:
    """The document raster: in memory, from its PGM path, or rendered on the fly."""
    if doc.image is not None:
        return doc.image
    if doc.image_path:
        p = Path(doc.image_path)
        if base is not None and not p.is_absolute():
            p = Path(base) / p
        if p.exists():
            return read_pgm(p)
    return render_image(doc, target)
