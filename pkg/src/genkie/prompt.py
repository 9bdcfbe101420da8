"""Prompt schemas, filled-in decoder targets and parsing generated text back to entities."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import EntitySet
from .tokenizer import SEP

EXTRACTION = "entity-extraction"
LABELLING = "entity-labelling"
TEMPLATE = "template"
QUESTION = "question"
ALL_TYPES = "template-all-types"

TASKS = (EXTRACTION, LABELLING)
STYLES = (TEMPLATE, QUESTION, ALL_TYPES)


class PromptError(ValueError):
    pass


def _norm(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class PromptSpec:
    """What to ask for.

    ``subject`` is an entity type for extraction and an entity value for
    labelling; it is unused by the all-types template.
    """

    task: str
    style: str
    schema: tuple[str, ...]
    subject: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "schema", tuple(self.schema))
        if self.task not in TASKS:
            raise PromptError(f"unknown task {self.task!r}")
        if self.style not in STYLES:
            raise PromptError(f"unknown prompt style {self.style!r}")
        if self.style == ALL_TYPES:
            if self.task != EXTRACTION:
                raise PromptError("template-all-types is only valid for entity extraction")
            if not self.schema:
                raise PromptError("template-all-types needs a non-empty schema")
            return
        if not self.subject or not _norm(self.subject):
            raise PromptError("prompt subject must be non-empty")
        if SEP in self.subject:
            raise PromptError("prompt subject may not contain the [SEP] marker")
        if self.task == EXTRACTION and self.subject not in self.schema:
            raise PromptError(f"subject {self.subject!r} is not in the schema {self.schema}")


@dataclass(frozen=True)
class ParsedOutput:
    pairs: EntitySet
    residue: str = ""


def build_prompt(spec: PromptSpec) -> str:
    if spec.style == ALL_TYPES:
        return " ".join(f"{t} is {SEP}" for t in spec.schema)
    subject = _norm(spec.subject)
    if spec.style == QUESTION:
        return f"{subject} is?"
    return f"{subject} is {SEP}"


def expected_pairs(spec: PromptSpec, gold: EntitySet) -> EntitySet:
    """The part of ``gold`` a spec asks for, in the order a target lists it."""
    if spec.style == ALL_TYPES:
        return EntitySet.from_pairs((t, gold.get(t)) for t in spec.schema if gold.get(t) is not None)
    if spec.task == EXTRACTION:
        v = gold.get(spec.subject)
        return EntitySet.from_pairs([(spec.subject, v)] if v is not None else [])
    subject = _norm(spec.subject)
    return EntitySet.from_pairs((t, v) for t, v in gold if _norm(v) == subject)


def build_target(spec: PromptSpec, gold: EntitySet) -> str:
    """The filled-in prompt the decoder learns to generate."""
    if spec.style == ALL_TYPES:
        # a type absent from the document keeps its slot with an empty value
        return " ".join(" ".join(filter(None, (t, "is", _norm(gold.get(t) or ""), SEP))) for t in spec.schema)
    if spec.task == EXTRACTION:
        value = gold.get(spec.subject)
        if value is None or not _norm(value):
            raise PromptError(f"gold has no value for {spec.subject!r}")
        value = _norm(value)
        return value if spec.style == QUESTION else f"{spec.subject} is {value} {SEP}"
    subject = _norm(spec.subject)
    types = [t for t, v in gold if _norm(v) == subject]
    if not types:
        raise PromptError(f"gold has no entity with value {subject!r}")
    return types[0] if spec.style == QUESTION else f"{subject} is {types[0]} {SEP}"


def template_pieces(spec: PromptSpec) -> list[str]:
    """Literal text the decoder must reproduce before each [SEP] slot.

    Empty for question prompts, which have no template to follow.
    """
    if spec.style == QUESTION:
        return []
    if spec.style == ALL_TYPES:
        return [f"{t} is" for t in spec.schema]
    return [f"{_norm(spec.subject)} is"]


def _match_type(chunk: str, types: tuple[str, ...]) -> tuple[str, str] | None:
    for t in sorted(types, key=len, reverse=True):
        head = f"{t} is"
        if chunk == head:
            return t, ""
        if chunk.startswith(head + " "):
            return t, chunk[len(head) + 1:].strip()
    return None


def parse_entities(generated: str, spec: PromptSpec) -> ParsedOutput:
    """Recover (type, value) pairs from decoder output.

    Never raises: anything that does not follow the grammar lands in
    ``residue``. Empty payloads (an all-types slot for an absent type) yield
    no pair.
    """
    text = _norm(generated)
    if spec.style == QUESTION:
        text = _norm(text.replace(SEP, " "))
        if not text:
            return ParsedOutput(EntitySet())
        if spec.task == EXTRACTION:
            return ParsedOutput(EntitySet.from_pairs([(spec.subject, text)]))
        return ParsedOutput(EntitySet.from_pairs([(text, _norm(spec.subject))]))

    found: dict[str, tuple[int, str, str]] = {}
    residue: list[str] = []
    for pos, chunk in enumerate(_norm(c) for c in text.split(SEP)):
        if not chunk:
            continue
        if spec.task == EXTRACTION:
            m = _match_type(chunk, spec.schema)
            if m is None:
                residue.append(chunk)
                continue
            etype, value = m
        else:
            subject = _norm(spec.subject)
            if chunk.startswith(subject + " is "):
                value, etype = subject, chunk[len(subject) + 4:].strip()
            elif " is " in chunk:
                value, etype = (s.strip() for s in chunk.split(" is ", 1))
            else:
                residue.append(chunk)
                continue
            if not value or not etype:
                residue.append(chunk)
                continue
        if etype in found:
            # last occurrence wins; keep the earlier one visible
            residue.append(found[etype][2])
        found[etype] = (pos, value, chunk)
    pairs = [(t, v) for t, (_, v, _) in sorted(found.items(), key=lambda kv: kv[1][0]) if v]
    return ParsedOutput(EntitySet.from_pairs(pairs), f" {SEP} ".join(residue))
