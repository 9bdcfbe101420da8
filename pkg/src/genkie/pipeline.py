"""Turning documents and prompt specs into model instances, batches and predictions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .corpus import ConfusionTable, Document, EntitySet, inject_ocr_noise, load_image
from .decode import DecodeConfig, Hypothesis, search
from .features import assign_layouts, normalize_bbox, pool_image
from .net import Batch, Model, ModelConfig, TrainConfig, TrainResult, train
from .prompt import (
    ALL_TYPES,
    EXTRACTION,
    LABELLING,
    PromptSpec,
    build_prompt,
    build_target,
    expected_pairs,
    parse_entities,
    template_pieces,
)
from .tokenizer import BEG_ID, END_ID, PAD_ID, Vocab, build_input_sequence

log = logging.getLogger(__name__)


@dataclass
class Instance:
    doc_id: str
    spec: PromptSpec
    ids: list[int]
    layout: np.ndarray  # (L, 6)
    gold: EntitySet  # the pairs this prompt asks for
    target: list[int] | None = None  # [BEG] ... [END]
    prefix_len: int = 0  # target tokens after [BEG] that merely restate the prompt
    doc: Document | None = field(default=None, repr=False)  # source document (for its image)


def prompt_specs(doc: Document, task: str, style: str, schema: Sequence[str]) -> list[PromptSpec]:
    """One spec per instance: per type (extraction), per doc (all types) or per gold value (labelling)."""
    schema = tuple(schema)
    if task == EXTRACTION:
        if style == ALL_TYPES:
            return [PromptSpec(task, style, schema)]
        return [PromptSpec(task, style, schema, t) for t in schema if doc.entities.get(t)]
    if task == LABELLING:
        seen: set[str] = set()
        out = []
        for t, v in doc.entities:
            if t in schema and v not in seen:
                seen.add(v)
                out.append(PromptSpec(task, style, schema, v))
        return out
    raise ValueError(f"unknown task {task!r}")


def _gold_for(doc: Document, spec: PromptSpec) -> EntitySet:
    return expected_pairs(spec, EntitySet.from_pairs((t, v) for t, v in doc.entities if t in spec.schema))


def make_instance(doc: Document, spec: PromptSpec, vocab: Vocab, max_len: int = 1024, with_target: bool = True) -> Instance:
    seq = build_input_sequence(doc.transcript, build_prompt(spec), vocab, max_len=max_len)
    seg_layouts = [normalize_bbox(s.bbox, doc.page_width, doc.page_height) for s in doc.segments]
    prompt_value = spec.subject if spec.style != ALL_TYPES else None
    layout = assign_layouts(seq, seg_layouts, prompt_value, vocab)
    gold = _gold_for(doc, spec)
    inst = Instance(doc.id, spec, seq.ids, layout, gold, doc=doc)
    if with_target:
        inst.target = [BEG_ID, *vocab.encode_marked(build_target(spec, gold)), END_ID]
        pieces = template_pieces(spec)
        inst.prefix_len = len(vocab.encode_marked(pieces[0])) if pieces else 0
    return inst


def build_instances(
    docs: Sequence[Document],
    vocab: Vocab,
    task: str,
    style: str,
    schema: Sequence[str],
    max_len: int = 1024,
    with_target: bool = True,
) -> list[Instance]:
    out = []
    for doc in docs:
        for spec in prompt_specs(doc, task, style, schema):
            out.append(make_instance(doc, spec, vocab, max_len, with_target))
    return out


class ImageCache:
    """Pooled ink maps per document id, rendered (or loaded) once."""

    def __init__(self, base: str | None = None) -> None:
        self.base = base
        self._pooled: dict[str, np.ndarray] = {}

    def get(self, doc: Document) -> np.ndarray:
        hit = self._pooled.get(doc.id)
        if hit is None:
            hit = pool_image(load_image(doc, self.base)).astype(np.float32)
            self._pooled[doc.id] = hit
        return hit

    def add(self, docs: Sequence[Document]) -> None:
        for d in docs:
            self.get(d)

    def for_instance(self, inst: Instance) -> np.ndarray:
        if inst.doc is not None:
            return self.get(inst.doc)
        try:
            return self._pooled[inst.doc_id]
        except KeyError:
            raise KeyError(f"no image cached for {inst.doc_id}") from None


def collate(
    items: Sequence[Instance], images: ImageCache | None, use_visual: bool = True, loss_on_prefix: bool = False
) -> Batch:
    B = len(items)
    L = max(len(it.ids) for it in items)
    ids = np.full((B, L), PAD_ID, dtype=np.int64)
    layout = np.zeros((B, L, 6), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for i, it in enumerate(items):
        n = len(it.ids)
        ids[i, :n] = it.ids
        layout[i, :n] = it.layout
        mask[i, :n] = True
    pooled = np.stack([images.for_instance(it) for it in items]) if (use_visual and images is not None) else None
    target = weight = None
    if all(it.target is not None for it in items):
        T = max(len(it.target) for it in items)
        target = np.full((B, T), PAD_ID, dtype=np.int64)
        weight = np.zeros((B, T - 1), dtype=np.float32)
        for i, it in enumerate(items):
            n = len(it.target)
            target[i, :n] = it.target
            start = 0 if loss_on_prefix else it.prefix_len
            weight[i, start:n - 1] = 1.0
    return Batch(ids, layout, mask, pooled, target, weight)


def batch_stream(
    make_instances: Callable[[int, np.random.Generator], Sequence[Instance]],
    batch_size: int,
    images: ImageCache | None,
    use_visual: bool = True,
    loss_on_prefix: bool = False,
) -> Callable[[int, np.random.Generator], Iterator[Batch]]:
    """Adapter for :func:`genkie.net.train`: shuffled, length-bucketed batches per epoch."""

    def gen(epoch: int, rng: np.random.Generator) -> Iterator[Batch]:
        items = list(make_instances(epoch, rng))
        order = rng.permutation(len(items))
        # sort within windows of 16 batches to cut padding, then shuffle batch order
        win = batch_size * 16
        batches = []
        for s in range(0, len(order), win):
            chunk = sorted(order[s:s + win], key=lambda i: len(items[i].ids))
            batches += [chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size)]
        for bi in rng.permutation(len(batches)):
            yield collate([items[i] for i in batches[bi]], images, use_visual, loss_on_prefix)

    return gen


def noisy_epochs(
    docs: Sequence[Document],
    vocab: Vocab,
    task: str,
    style: str,
    schema: Sequence[str],
    level_pct: int,
    table: ConfusionTable,
    seed: int,
    max_len: int = 1024,
) -> Callable[[int, np.random.Generator], list[Instance]]:
    """Instances whose transcripts are re-corrupted every epoch; targets stay clean."""
    clean = build_instances(docs, vocab, task, style, schema, max_len)

    def make(epoch: int, rng: np.random.Generator) -> list[Instance]:
        if level_pct <= 0:
            return clean
        noisy = [inject_ocr_noise(d, level_pct, table, seed * 1_000_003 + epoch) for d in docs]
        out = []
        for nd, d in zip(noisy, docs):
            for spec in prompt_specs(d, task, style, schema):
                inst = make_instance(nd, spec, vocab, max_len)
                # gold and target come from the clean document
                inst.gold = _gold_for(d, spec)
                out.append(inst)
        return out

    return make


def decode_configs(instances: Sequence[Instance], vocab: Vocab, width: int, max_len: int, use_prefix: bool) -> list[DecodeConfig]:
    cfgs = []
    for it in instances:
        pieces = template_pieces(it.spec) if use_prefix else []
        if pieces:
            prefix = [BEG_ID, *vocab.encode_marked(pieces[0])]
            literals = [vocab.encode_marked(p) for p in pieces[1:]]
            cfgs.append(DecodeConfig(width, max(max_len, len(prefix)), prefix, literals))
        else:
            cfgs.append(DecodeConfig(width, max_len))
    return cfgs


@dataclass
class Prediction:
    instance: Instance
    hypothesis: Hypothesis
    text: str
    pairs: EntitySet
    residue: str


def predict(
    model: Model,
    instances: Sequence[Instance],
    vocab: Vocab,
    images: ImageCache | None,
    width: int = 5,
    max_len: int = 128,
    use_prefix: bool = True,
    batch_size: int = 64,
) -> list[Prediction]:
    """Beam-search every instance and parse its output with the prompt grammar."""
    order = sorted(range(len(instances)), key=lambda i: len(instances[i].ids))
    results: dict[int, Prediction] = {}
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        items = [instances[i] for i in idx]
        batch = collate(items, images, model.config.use_visual)
        hyps = search(model, batch, decode_configs(items, vocab, width, max_len, use_prefix))
        for i, it, h in zip(idx, items, hyps):
            text = vocab.decode_marked([t for t in h.ids if t not in (BEG_ID, END_ID)])
            parsed = parse_entities(text, it.spec)
            results[i] = Prediction(it, h, text, parsed.pairs, parsed.residue)
    return [results[i] for i in range(len(instances))]


def train_model(
    train_docs: Sequence[Document],
    vocab: Vocab,
    images: ImageCache | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    task: str,
    style: str,
    schema: Sequence[str],
    *,
    noise_level: int = 0,
    table: ConfusionTable | None = None,
    instances: Sequence[Instance] | None = None,
    on_epoch: Callable[[int, TrainResult], None] | None = None,
    model: Model | None = None,
) -> Model:
    """Build instances (optionally re-corrupted each epoch) and train a fresh model.

    ``instances`` overrides the instances built from ``train_docs`` (used by
    few-shot splits); it cannot be combined with training noise.
    """
    if model is None:
        model = Model(model_config, seed=train_config.seed)
    if images is not None and model_config.use_visual:
        images.add(train_docs)
    if instances is not None:
        if noise_level:
            raise ValueError("pre-built instances cannot be re-corrupted")
        fixed = list(instances)
        make = lambda epoch, rng: fixed  # noqa: E731
    elif noise_level:
        if table is None:
            raise ValueError("training noise needs a confusion table")
        make = noisy_epochs(train_docs, vocab, task, style, schema, noise_level, table, train_config.seed, model_config.max_enc_len)
    else:
        fixed = build_instances(train_docs, vocab, task, style, schema, model_config.max_enc_len)
        make = lambda epoch, rng: fixed  # noqa: E731
    stream = batch_stream(make, train_config.batch_size, images, model_config.use_visual, train_config.loss_on_prefix)
    res = train(model, stream, train_config, on_epoch=on_epoch)
    log.info("trained %d steps in %.0fs, final loss %.4f", res.steps, res.seconds, res.losses[-1] if res.losses else float("nan"))
    model.train_result = res
    return model


def group_by_doc(preds: Sequence[Prediction]) -> tuple[list[str], list[EntitySet], list[EntitySet]]:
    """Merge per-instance predictions and golds into per-document entity sets."""
    ids: list[str] = []
    pred: dict[str, list] = {}
    gold: dict[str, list] = {}
    for p in preds:
        d = p.instance.doc_id
        if d not in pred:
            ids.append(d)
            pred[d], gold[d] = [], []
        pred[d] += list(p.pairs)
        gold[d] += list(p.instance.gold)
    return ids, [EntitySet.from_pairs(pred[d]) for d in ids], [EntitySet.from_pairs(gold[d]) for d in ids]


__all__ = [
    "Instance",
    "ImageCache",
    "Prediction",
    "batch_stream",
    "build_instances",
    "collate",
    "decode_configs",
    "group_by_doc",
    "make_instance",
    "noisy_epochs",
    "predict",
    "prompt_specs",
    "train_model",
]
