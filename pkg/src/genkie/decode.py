"""Vanilla and prefix-constrained beam search over the trained decoder.

Hypotheses are ranked by raw cumulative log-probability while searching and
by length-normalized log-probability (divided by the number of tokens after
[BEG]) when the final answer is picked. Finished hypotheses stay in the beam
and compete with live ones.

Prefix search follows a template automaton: the prefix is force-fed, then a
free slot runs until the model emits [SEP]; each further literal is then
force-fed and opens another free slot; after the last slot's [SEP] the
sequence is closed with a forced [END]. Free slots cannot emit [END], so
every finished output follows the template.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .net import Batch, Model
from .tokenizer import BEG_ID, END_ID, PAD_ID, SEP_ID

_CHUNK = 512  # live hypotheses per decoder call


class DecodeError(ValueError):
    pass


@dataclass
class DecodeConfig:
    width: int = 5
    max_len: int = 512  # tokens after [BEG], forced ones included
    prefix: list[int] | None = None  # starts with [BEG]
    literals: list[list[int]] = field(default_factory=list)  # forced after each closed slot but the last

    def __post_init__(self) -> None:
        if self.width < 1:
            raise DecodeError(f"beam width must be >= 1, got {self.width}")
        if self.max_len < 1:
            raise DecodeError(f"max_len must be >= 1, got {self.max_len}")
        if self.prefix is not None:
            self.prefix = [int(i) for i in self.prefix]
            if not self.prefix or self.prefix[0] != BEG_ID:
                raise DecodeError("prefix must start with [BEG]")
            if len(self.prefix) - 1 > self.max_len:
                raise DecodeError(f"prefix of {len(self.prefix) - 1} tokens exceeds max_len={self.max_len}")
        elif self.literals:
            raise DecodeError("slot literals need a prefix")
        self.literals = [[int(i) for i in lit] for lit in self.literals]

    @property
    def constrained(self) -> bool:
        return self.prefix is not None


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]  # starts with [BEG]; ends with [END] when finished
    logprob: float

    @property
    def finished(self) -> bool:
        return len(self.ids) > 1 and self.ids[-1] == END_ID

    @property
    def score(self) -> float:
        return self.logprob / max(1, len(self.ids) - 1)


@dataclass
class _Hyp:
    ids: list[int]
    logprob: float
    pending: list[int]  # forced tokens still to emit
    slots: int = 0  # free slots closed so far
    done: bool = False

    def key(self) -> tuple:
        return (-self.logprob, tuple(self.ids))


def _start(cfg: DecodeConfig) -> _Hyp:
    if cfg.prefix is None:
        return _Hyp([BEG_ID], 0.0, [])
    h = _Hyp([BEG_ID], 0.0, list(cfg.prefix[1:]))
    return h


def _advance(h: _Hyp, tok: int, lp: float, cfg: DecodeConfig) -> _Hyp:
    pending = h.pending[1:] if h.pending else []
    slots = h.slots
    if cfg.constrained and not h.pending and tok == SEP_ID:
        slots += 1
        pending = list(cfg.literals[slots - 1]) if slots <= len(cfg.literals) else [END_ID]
    ids = h.ids + [tok]
    done = tok == END_ID or len(ids) - 1 >= cfg.max_len
    return _Hyp(ids, h.logprob + lp, pending, slots, done)


def _banned(cfg: DecodeConfig, vocab_size: int) -> np.ndarray:
    ban = np.zeros(vocab_size, dtype=bool)
    ban[[PAD_ID, BEG_ID]] = True
    if cfg.constrained:
        ban[END_ID] = True  # free slots close with [SEP]; [END] is forced afterwards
    return ban


def _step_logprobs(model: Model, kvs, mask: np.ndarray, hyps: list[tuple[int, _Hyp]]) -> np.ndarray:
    out = []
    for s in range(0, len(hyps), _CHUNK):
        part = hyps[s:s + _CHUNK]
        doc = np.array([b for b, _ in part])
        ids = np.array([h.ids for _, h in part], dtype=np.int64)
        sub = [(Tensor(k.data[doc]), Tensor(v.data[doc])) for k, v in kvs]
        logits = model.decode(ids, sub, mask[doc], last_only=True).data[:, 0].astype(np.float64)
        out.append(ag.log_softmax_np(logits))
    return np.concatenate(out, axis=0)


def search_encoded(
    model: Model, e: Tensor, mask: np.ndarray, cfgs: DecodeConfig | Sequence[DecodeConfig]
) -> list[Hypothesis]:
    """Beam search for each row of a fused encoder input ``e`` (B, S, d)."""
    B = e.shape[0]
    if isinstance(cfgs, DecodeConfig):
        cfgs = [cfgs] * B
    if len(cfgs) != B:
        raise DecodeError(f"{len(cfgs)} decode configs for {B} inputs")
    for cfg in cfgs:
        if cfg.max_len + 1 > model.config.max_dec_len:
            raise DecodeError(f"max_len={cfg.max_len} exceeds the decoder's {model.config.max_dec_len - 1} positions")
    V = model.config.vocab_size
    mask = np.asarray(mask, dtype=bool)
    with ag.no_grad():
        kvs = model.cross_kv(model.encode(e, mask))
        beams = [[_start(cfg)] for cfg in cfgs]
        bans = [_banned(cfg, V) for cfg in cfgs]
        while True:
            live = [(b, h) for b in range(B) for h in beams[b] if not h.done]
            if not live:
                break
            lps = _step_logprobs(model, kvs, mask, live)
            cands: list[list[_Hyp]] = [[h for h in beam if h.done] for beam in beams]
            for (b, h), lp in zip(live, lps):
                cfg = cfgs[b]
                if h.pending:
                    tok = h.pending[0]
                    cands[b].append(_advance(h, tok, float(lp[tok]), cfg))
                    continue
                order = np.argsort(-lp, kind="stable")  # ties -> lower id
                taken = 0
                for tok in order:
                    if bans[b][tok]:
                        continue
                    cands[b].append(_advance(h, int(tok), float(lp[tok]), cfg))
                    taken += 1
                    if taken == cfg.width:
                        break
            for b in range(B):
                cands[b].sort(key=_Hyp.key)
                beams[b] = cands[b][:cfgs[b].width]
    out = []
    for beam in beams:
        hyps = [Hypothesis(tuple(h.ids), h.logprob) for h in beam]
        out.append(min(hyps, key=lambda h: (-h.score, h.ids)))
    return out


def search(model: Model, batch: Batch, cfgs: DecodeConfig | Sequence[DecodeConfig]) -> list[Hypothesis]:
    """Embed and encode ``batch`` once, then beam-search every document."""
    with ag.no_grad():
        e, mask = model.embed(batch)
    return search_encoded(model, e, mask, cfgs)


def beam_search(model: Model, batch: Batch, cfg: DecodeConfig) -> list[Hypothesis]:
    """Unconstrained beam search (any configured prefix is ignored)."""
    if cfg.constrained:
        cfg = DecodeConfig(width=cfg.width, max_len=cfg.max_len)
    return search(model, batch, cfg)


def prefix_beam_search(model: Model, batch: Batch, cfgs: DecodeConfig | Sequence[DecodeConfig]) -> list[Hypothesis]:
    """Template-constrained beam search; every config must carry a prefix."""
    for cfg in [cfgs] if isinstance(cfgs, DecodeConfig) else cfgs:
        if not cfg.constrained:
            raise DecodeError("prefix beam search needs a prefix")
    return search(model, batch, cfgs)
