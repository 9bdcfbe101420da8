"""Token-level metrics, OCR-robustness sweeps, ablation runners and few-shot splits."""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import ConfusionTable, Document, EntitySet, inject_ocr_noise
from .net import Model, ModelConfig, TrainConfig
from .pipeline import ImageCache, Instance, Prediction, build_instances, group_by_doc, predict, train_model
from .prompt import ALL_TYPES, EXTRACTION
from .tokenizer import Vocab

log = logging.getLogger(__name__)

MODALITIES = {
    "T": (False, False),
    "T+V": (False, True),
    "T+L": (True, False),
    "T+L+V": (True, True),
}


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class MetricsRecord:
    precision: float
    recall: float
    f1: float
    matched: int = 0
    predicted: int = 0
    gold: int = 0
    per_type: dict[str, MetricsRecord] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, matched: int, predicted: int, gold: int) -> MetricsRecord:
        p = matched / predicted if predicted else 0.0
        r = matched / gold if gold else 0.0
        return cls(p, r, _f1(p, r), matched, predicted, gold)

    def to_dict(self) -> dict:
        out = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matched": self.matched,
            "predicted": self.predicted,
            "gold": self.gold,
        }
        if self.per_type:
            out["per_type"] = {t: m.to_dict() for t, m in self.per_type.items()}
        return out


def _bags(es: EntitySet) -> dict[str, Counter]:
    out: dict[str, Counter] = {}
    for t, v in es:
        out.setdefault(t, Counter()).update(v.split())
    return out


def type_counts(pred: EntitySet, gold: EntitySet) -> dict[str, tuple[int, int, int]]:
    """Per type: (matched, predicted, gold) whitespace-token counts."""
    pb, gb = _bags(pred), _bags(gold)
    out = {}
    for t in list(gb) + [t for t in pb if t not in gb]:
        p, g = pb.get(t, Counter()), gb.get(t, Counter())
        out[t] = (sum((p & g).values()), sum(p.values()), sum(g.values()))
    return out


def corpus_prf(preds: Sequence[EntitySet], golds: Sequence[EntitySet], macro: bool = False) -> MetricsRecord:
    """Micro-averaged (default) or type-macro-averaged token P/R/F over documents."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold sets")
    totals: dict[str, list[int]] = {}
    for p, g in zip(preds, golds):
        for t, counts in type_counts(p, g).items():
            acc = totals.setdefault(t, [0, 0, 0])
            for i, c in enumerate(counts):
                acc[i] += c
    per_type = {t: MetricsRecord.from_counts(*c) for t, c in totals.items()}
    m, np_, ng = (sum(c[i] for c in totals.values()) for i in range(3))
    rec = MetricsRecord.from_counts(m, np_, ng)
    if macro and per_type:
        p = sum(r.precision for r in per_type.values()) / len(per_type)
        r = sum(r.recall for r in per_type.values()) / len(per_type)
        rec = MetricsRecord(p, r, _f1(p, r), m, np_, ng)
    rec.per_type = per_type
    return rec


def token_prf(pred: EntitySet, gold: EntitySet) -> MetricsRecord:
    """Token-level P/R/F for one document."""
    return corpus_prf([pred], [gold])


def score_predictions(preds: Sequence[Prediction], macro: bool = False) -> MetricsRecord:
    _, p, g = group_by_doc(preds)
    return corpus_prf(p, g, macro)


def evaluate(
    model: Model,
    instances: Sequence[Instance],
    vocab: Vocab,
    images: ImageCache | None,
    width: int = 5,
    use_prefix: bool = True,
    max_len: int = 128,
    macro: bool = False,
) -> tuple[MetricsRecord, list[Prediction]]:
    preds = predict(model, instances, vocab, images, width=width, max_len=max_len, use_prefix=use_prefix)
    return score_predictions(preds, macro), preds


# ---------------------------------------------------------------------------
# OCR robustness

def correction_counts(clean: Document, noisy: Document, pred: EntitySet, schema: Sequence[str]) -> tuple[int, int]:
    """(recovered, corrupted) gold entity tokens for one document.

    A gold token is corrupted when its word in a labelled transcript segment
    differs between the clean and the noisy document. It counts as recovered
    when the prediction holds more clean copies of it (for that type) than the
    noisy transcript left intact.
    """
    corrupted: dict[str, Counter] = {}
    intact: dict[str, Counter] = {}
    for cs, ns in zip(clean.segments, noisy.segments):
        if cs.label not in schema:
            continue
        for cw, nw in zip(cs.text.split(" "), ns.text.split(" ")):
            bucket = corrupted if cw != nw else intact
            bucket.setdefault(cs.label, Counter())[cw] += 1
    pb = _bags(pred)
    rec = bad = 0
    for t, words in corrupted.items():
        p = pb.get(t, Counter())
        ok = intact.get(t, Counter())
        for w, n in words.items():
            bad += n
            rec += min(n, max(0, p[w] - ok[w]))
    return rec, bad


@dataclass
class SweepCurve:
    points: list[tuple[int, MetricsRecord]]
    correction: dict[int, float] = field(default_factory=dict)  # level -> share of corrupted gold tokens recovered
    seed: int = 0
    model_id: str = ""
    prompt_style: str = ""

    def __post_init__(self) -> None:
        levels = [lv for lv, _ in self.points]
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"sweep levels must be strictly increasing, got {levels}")

    def f1_at(self, level: int) -> float:
        return dict(self.points)[level].f1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "precision", "recall", "f1"])
        for lv, m in self.points:
            w.writerow([lv, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}"])
        return buf.getvalue()


def parse_levels(spec: str) -> list[int]:
    """``"5:50:5"`` -> [5, 10, ..., 50]; ``"0,10,20"`` -> [0, 10, 20]."""
    if ":" in spec:
        parts = [int(x) for x in spec.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"level range must be start:stop:step, got {spec!r}")
        a, b, s = parts
        return list(range(a, b + 1, s))
    return [int(x) for x in spec.split(",") if x.strip()]


def robustness_sweep(
    model: Model,
    docs: Sequence[Document],
    levels: Sequence[int],
    table: ConfusionTable,
    seed: int,
    *,
    vocab: Vocab,
    images: ImageCache | None,
    task: str = EXTRACTION,
    style: str = "question",
    schema: Sequence[str] = ("company", "address", "date", "total"),
    width: int = 5,
    use_prefix: bool = True,
    max_len: int = 128,
    model_id: str = "",
) -> SweepCurve:
    """Corrupt test transcripts at each level and score against the clean gold values."""
    points = []
    correction = {}
    for lv in levels:
        noisy = [inject_ocr_noise(d, lv, table, seed) for d in docs]
        inst = build_instances(noisy, vocab, task, style, schema)
        preds = predict(model, inst, vocab, images, width=width, max_len=max_len, use_prefix=use_prefix)
        ids, pred_sets, gold_sets = group_by_doc(preds)
        points.append((lv, corpus_prf(pred_sets, gold_sets)))
        by_id = {c.id: (c, n) for c, n in zip(docs, noisy)}
        rec = bad = 0
        for did, ps in zip(ids, pred_sets):
            r, b = correction_counts(*by_id[did], ps, schema)
            rec += r
            bad += b
        correction[lv] = rec / bad if bad else 0.0
        log.info("noise %d%%: F1 %.4f, corrected %.3f of %d corrupted gold tokens", lv, points[-1][1].f1, correction[lv], bad)
    return SweepCurve(points, correction, seed, model_id, style)


# ---------------------------------------------------------------------------
# few-shot

def fewshot_split(instances: Sequence[Instance], unseen_type: str, k: int, schema: Sequence[str]) -> list[Instance]:
    """Drop training instances that ask about ``unseen_type`` except the first ``k`` by document id."""
    if unseen_type not in schema:
        raise ValueError(f"unknown entity type {unseen_type!r}; schema is {tuple(schema)}")
    if k < 0:
        raise ValueError("k must be >= 0")
    if any(it.spec.style == ALL_TYPES for it in instances):
        raise ValueError("all-types prompts cover every type at once; use a per-type prompt style")

    def is_unseen(it: Instance) -> bool:
        if it.spec.task == EXTRACTION:
            return it.spec.subject == unseen_type
        return any(t == unseen_type for t, _ in it.gold)

    unseen = sorted((it for it in instances if is_unseen(it)), key=lambda it: it.doc_id)
    keep = {id(it) for it in unseen[:k]}
    return [it for it in instances if not is_unseen(it) or id(it) in keep]


# ---------------------------------------------------------------------------
# ablations

@dataclass
class AblationRow:
    modality: str
    prompt: str
    prefix: bool
    metrics: MetricsRecord


def ablation_table_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["modality", "prompt", "prefix", "precision", "recall", "f1"])
    for r in rows:
        m = r.metrics
        w.writerow([r.modality, r.prompt, "on" if r.prefix else "off", f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}"])
    return buf.getvalue()


def ablation_run(
    train_docs: Sequence[Document],
    test_docs: Sequence[Document],
    vocab: Vocab,
    images: ImageCache | None,
    *,
    modalities: Sequence[str] = ("T", "T+V", "T+L", "T+L+V"),
    prompts: Sequence[str] = ("question", "template"),
    prefixes: Sequence[bool] = (True, False),
    task: str = EXTRACTION,
    schema: Sequence[str] = ("company", "address", "date", "total"),
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    width: int = 5,
    max_len: int = 128,
) -> list[AblationRow]:
    """One model per (modality, prompt) with a shared seed; prefix on/off only changes decoding."""
    base = model_config or ModelConfig(vocab_size=len(vocab))
    tcfg = train_config or TrainConfig()
    rows = []
    for mod in modalities:
        if mod not in MODALITIES:
            raise ValueError(f"unknown modality {mod!r}; choose from {tuple(MODALITIES)}")
        use_layout, use_visual = MODALITIES[mod]
        for style in prompts:
            cfg = ModelConfig.from_dict({**base.__dict__, "use_layout": use_layout, "use_visual": use_visual})
            model = train_model(train_docs, vocab, images, cfg, tcfg, task, style, schema)
            test = build_instances(test_docs, vocab, task, style, schema)
            done: dict[bool, MetricsRecord] = {}
            for pre in prefixes:
                # question prompts have no template: prefix on and off are the same search
                key = pre and style != "question"
                if key not in done:
                    done[key], _ = evaluate(model, test, vocab, images, width=width, use_prefix=pre, max_len=max_len)
                m = done[key]
                log.info("ablation %s / %s / prefix %s: F1 %.4f", mod, style, pre, m.f1)
                rows.append(AblationRow(mod, style, pre, m))
    return rows
