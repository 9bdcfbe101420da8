"""Encoder-decoder Transformer over fused embeddings, training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .features import LAYOUT_BINS, LAYOUT_TABLES, embed_layout, embed_text, embed_visual, fuse

log = logging.getLogger(__name__)

NEG = -1e9


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 1004
    d: int = 96
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 384
    dropout: float = 0.1
    max_enc_len: int = 1024
    max_dec_len: int = 513  # BEG plus up to 512 generated tokens
    conv_channels: tuple[int, ...] = (16, 32, 32)
    max_visual: int = 64
    use_layout: bool = True
    use_visual: bool = True
    embed_std: float = 0.1  # init scale of token, position and layout tables

    def __post_init__(self) -> None:
        if self.embed_std <= 0:
            raise ValueError("embed_std must be positive")
        self.conv_channels = tuple(self.conv_channels)
        if self.d % 6:
            raise ValueError(f"d={self.d} must be divisible by 6 (six layout sub-embeddings)")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if len(self.conv_channels) != 3:
            raise ValueError("visual stem has exactly three conv stages")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 5e-5
    seed: int = 0
    clip_norm: float | None = 1.0
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    warmup_steps: int = 0
    loss_on_prefix: bool = False
    max_minutes: float | None = None
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


@dataclass
class Batch:
    """Padded encoder inputs and decoder targets for B instances."""

    ids: np.ndarray  # (B, L) int
    layout: np.ndarray  # (B, L, 6) int
    mask: np.ndarray  # (B, L) bool
    pooled: np.ndarray | None  # (B, 48, 48) float
    target: np.ndarray | None = None  # (B, T) int, starts with BEG
    weight: np.ndarray | None = None  # (B, T-1) loss weights for target[:, 1:]


class Model:
    """Parameter store plus the forward computation.

    The output projection reuses the token table (``params["tok"]``), so the
    encoder input, decoder input and output logits share one tensor.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        d = c.d

        def p(name, shape, std=0.02, value=None):
            data = rng.normal(0.0, std, size=shape) if value is None else np.full(shape, value)
            self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)

        # embeddings start well above the 0.02 weight scale; at 0.02 the model
        # is slow to learn attention-based copying
        e = c.embed_std
        p("tok", (c.vocab_size, d), std=e)
        p("pos_enc", (c.max_enc_len, d), std=e)
        p("pos_dec", (c.max_dec_len, d), std=e)
        p("pos_vis", (c.max_visual, d), std=e)
        for name in LAYOUT_TABLES:
            p(name, (LAYOUT_BINS, d // 6), std=e)
        cin = 1
        for k, cout in enumerate(c.conv_channels):
            p(f"conv{k}_w", (9 * cin, cout), std=math.sqrt(2.0 / (9 * cin)))
            p(f"conv{k}_b", (cout,), value=0.0)
            cin = cout
        p("vis_proj", (cin, d), std=1.0 / math.sqrt(cin))
        resid_std = 0.02 / math.sqrt(2 * max(c.enc_layers, c.dec_layers))
        for i in range(c.enc_layers):
            pre = f"enc{i}."
            p(pre + "ln1_g", (d,), value=1.0)
            p(pre + "ln1_b", (d,), value=0.0)
            p(pre + "qkv_w", (d, 3 * d))
            p(pre + "qkv_b", (3 * d,), value=0.0)
            p(pre + "o_w", (d, d), std=resid_std)
            p(pre + "o_b", (d,), value=0.0)
            p(pre + "ln2_g", (d,), value=1.0)
            p(pre + "ln2_b", (d,), value=0.0)
            p(pre + "ff1_w", (d, c.d_ff))
            p(pre + "ff1_b", (c.d_ff,), value=0.0)
            p(pre + "ff2_w", (c.d_ff, d), std=resid_std)
            p(pre + "ff2_b", (d,), value=0.0)
        p("enc_ln_g", (d,), value=1.0)
        p("enc_ln_b", (d,), value=0.0)
        for i in range(c.dec_layers):
            pre = f"dec{i}."
            p(pre + "ln1_g", (d,), value=1.0)
            p(pre + "ln1_b", (d,), value=0.0)
            p(pre + "qkv_w", (d, 3 * d))
            p(pre + "qkv_b", (3 * d,), value=0.0)
            p(pre + "o_w", (d, d), std=resid_std)
            p(pre + "o_b", (d,), value=0.0)
            p(pre + "ln2_g", (d,), value=1.0)
            p(pre + "ln2_b", (d,), value=0.0)
            p(pre + "xq_w", (d, d))
            p(pre + "xq_b", (d,), value=0.0)
            p(pre + "xkv_w", (d, 2 * d))
            p(pre + "xkv_b", (2 * d,), value=0.0)
            p(pre + "xo_w", (d, d), std=resid_std)
            p(pre + "xo_b", (d,), value=0.0)
            p(pre + "ln3_g", (d,), value=1.0)
            p(pre + "ln3_b", (d,), value=0.0)
            p(pre + "ff1_w", (d, c.d_ff))
            p(pre + "ff1_b", (c.d_ff,), value=0.0)
            p(pre + "ff2_w", (c.d_ff, d), std=resid_std)
            p(pre + "ff2_b", (d,), value=0.0)
        p("dec_ln_g", (d,), value=1.0)
        p("dec_ln_b", (d,), value=0.0)
        self._rng: np.random.Generator | None = None  # dropout stream, set while training
        self.train_result = None  # set by pipeline.train_model

    # -- utilities ---------------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> Model:
        """A copy with every tensor cast to ``dtype`` (used by gradient checks)."""
        m = Model.__new__(Model)
        m.config = self.config
        m.dtype = np.dtype(dtype)
        m.params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        m._rng = None
        m.train_result = None
        return m

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def _drop(self, x: Tensor) -> Tensor:
        return ag.dropout(x, self.config.dropout, self._rng)

    # -- embeddings ----------------------------------------------------------
    def embed(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        """Fused encoder input E (B, K+L, d) and its key mask (B, K+L)."""
        c = self.config
        P = self.params
        te = embed_text(P["tok"], P["pos_enc"], batch.ids)
        le = embed_layout([P[n] for n in LAYOUT_TABLES], batch.layout) if c.use_layout else None
        ve = None
        mask = batch.mask.astype(bool)
        if c.use_visual:
            if batch.pooled is None:
                raise ValueError("model uses the visual channel but the batch carries no images")
            convs = [(P[f"conv{k}_w"], P[f"conv{k}_b"]) for k in range(3)]
            ve = embed_visual(convs, P["vis_proj"], P["pos_vis"], batch.pooled)
            mask = np.concatenate([np.ones(ve.shape[:2], dtype=bool), mask], axis=1)
        e = fuse(ve, te, le, use_layout=c.use_layout, use_visual=c.use_visual)
        return e, mask

    # -- transformer blocks -------------------------------------------------
    def _heads(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        H = self.config.heads
        return ag.transpose(ag.reshape(x, (B, T, H, d // H)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        B, H, T, dh = x.shape
        return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray) -> Tensor:
        dh = q.shape[-1]
        s = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)))
        s = ag.mul(s, np.asarray(1.0 / math.sqrt(dh), dtype=self.dtype))
        a = self._drop(ag.softmax(s, bias))
        return self._merge(ag.matmul(a, v))

    def _self_attn(self, x: Tensor, pre: str, bias: np.ndarray) -> Tensor:
        P = self.params
        d = self.config.d
        qkv = ag.linear(x, P[pre + "qkv_w"], P[pre + "qkv_b"])
        B, T, _ = qkv.shape
        qkv = ag.transpose(ag.reshape(qkv, (B, T, 3, self.config.heads, d // self.config.heads)), (2, 0, 3, 1, 4))
        q = _index0(qkv, 0)
        k = _index0(qkv, 1)
        v = _index0(qkv, 2)
        o = self._attend(q, k, v, bias)
        return ag.linear(o, P[pre + "o_w"], P[pre + "o_b"])

    def _ffn(self, x: Tensor, pre: str) -> Tensor:
        P = self.params
        h = ag.gelu(ag.linear(x, P[pre + "ff1_w"], P[pre + "ff1_b"]))
        return ag.linear(self._drop(h), P[pre + "ff2_w"], P[pre + "ff2_b"])

    def encode(self, e: Tensor, mask: np.ndarray) -> Tensor:
        P = self.params
        bias = np.where(mask, 0.0, NEG).astype(self.dtype)[:, None, None, :]
        x = self._drop(e)
        for i in range(self.config.enc_layers):
            pre = f"enc{i}."
            h = ag.layer_norm(x, P[pre + "ln1_g"], P[pre + "ln1_b"])
            x = ag.add(x, self._drop(self._self_attn(h, pre, bias)))
            h = ag.layer_norm(x, P[pre + "ln2_g"], P[pre + "ln2_b"])
            x = ag.add(x, self._drop(self._ffn(h, pre)))
        return ag.layer_norm(x, P["enc_ln_g"], P["enc_ln_b"])

    def cross_kv(self, memory: Tensor) -> list[tuple[Tensor, Tensor]]:
        """Per-decoder-layer cross-attention keys/values (reusable across decode steps)."""
        P = self.params
        d = self.config.d
        out = []
        for i in range(self.config.dec_layers):
            pre = f"dec{i}."
            kv = ag.linear(memory, P[pre + "xkv_w"], P[pre + "xkv_b"])
            B, S, _ = kv.shape
            kv = ag.transpose(ag.reshape(kv, (B, S, 2, self.config.heads, d // self.config.heads)), (2, 0, 3, 1, 4))
            out.append((_index0(kv, 0), _index0(kv, 1)))
        return out

    def decode(
        self, target_in: np.ndarray, kvs: list[tuple[Tensor, Tensor]], mem_mask: np.ndarray, last_only: bool = False
    ) -> Tensor:
        """Logits (B, T, V) for decoder inputs ``target_in`` (B, T); (B, 1, V) with ``last_only``."""
        P = self.params
        B, T = target_in.shape
        if T > self.config.max_dec_len:
            raise ValueError(f"target length {T} exceeds max_dec_len={self.config.max_dec_len}")
        causal = np.triu(np.full((T, T), NEG, dtype=self.dtype), k=1)[None, None]
        mem_bias = np.where(mem_mask, 0.0, NEG).astype(self.dtype)[:, None, None, :]
        x = self._drop(embed_text(P["tok"], P["pos_dec"], target_in))
        for i in range(self.config.dec_layers):
            pre = f"dec{i}."
            h = ag.layer_norm(x, P[pre + "ln1_g"], P[pre + "ln1_b"])
            x = ag.add(x, self._drop(self._self_attn(h, pre, causal)))
            h = ag.layer_norm(x, P[pre + "ln2_g"], P[pre + "ln2_b"])
            q = self._heads(ag.linear(h, P[pre + "xq_w"], P[pre + "xq_b"]))
            k, v = kvs[i]
            o = self._attend(q, k, v, mem_bias)
            x = ag.add(x, self._drop(ag.linear(o, P[pre + "xo_w"], P[pre + "xo_b"])))
            h = ag.layer_norm(x, P[pre + "ln3_g"], P[pre + "ln3_b"])
            x = ag.add(x, self._drop(self._ffn(h, pre)))
        if last_only:
            x = ag.Tensor(x.data[:, -1:]) if not x.requires_grad else ag.gather(x, np.array([T - 1]), axis=1)
        x = ag.layer_norm(x, P["dec_ln_g"], P["dec_ln_b"])
        return ag.matmul(x, ag.transpose(P["tok"], (1, 0)))

    def forward(self, e: Tensor, mask: np.ndarray, target_in: np.ndarray) -> Tensor:
        memory = self.encode(e, mask)
        return self.decode(target_in, self.cross_kv(memory), mask)

    def loss(self, batch: Batch, label_smoothing: float = 0.0) -> Tensor:
        e, mask = self.embed(batch)
        logits = self.forward(e, mask, batch.target[:, :-1])
        return ag.cross_entropy(logits, batch.target[:, 1:], batch.weight, label_smoothing)


def _index0(x: Tensor, i: int) -> Tensor:
    """x[i] along the leading axis."""
    def bw(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        x._accum(gx)

    return ag._make(x.data[i], (x,), bw)


def forward(model: Model, e: Tensor, mask: np.ndarray, target_prefix: Sequence[int]) -> np.ndarray:
    """Logits (len(target_prefix), V) for a single example; row t sees prefix[:t+1]."""
    from .tokenizer import BEG_ID

    if not len(target_prefix) or target_prefix[0] != BEG_ID:
        raise ValueError("target prefix must start with [BEG]")
    ee = e if e.data.ndim == 3 else ag.reshape(e, (1, *e.shape))
    m = np.asarray(mask, dtype=bool).reshape(1, -1)
    with ag.no_grad():
        out = model.forward(ee, m, np.asarray(target_prefix, dtype=np.int64)[None])
    return out.data[0]


# ---------------------------------------------------------------------------
# training

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if scale != 1.0:
                g = g * scale
            if self.wd:
                g = g + self.wd * p.data
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    epochs: int = 0
    seconds: float = 0.0


def grad_norm(model: Model) -> float:
    return math.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum()) for t in model.params.values() if t.grad is not None))


def train(
    model: Model,
    batches: Callable[[int, np.random.Generator], Iterable[Batch]],
    cfg: TrainConfig,
    on_epoch: Callable[[int, TrainResult], None] | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Adam on masked token cross-entropy.

    ``batches(epoch, rng)`` yields the epoch's batches; it receives the
    training RNG so shuffling (and any per-epoch corruption) is seeded.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.lr, weight_decay=cfg.weight_decay)
    res = TrainResult()
    start = time.time()
    model._rng = np.random.default_rng(cfg.seed + 7919)
    try:
        for epoch in range(cfg.epochs):
            for batch in batches(epoch, rng):
                model.zero_grad()
                if cfg.warmup_steps:
                    opt.lr = cfg.lr * min(1.0, (res.steps + 1) / cfg.warmup_steps)
                loss = model.loss(batch, cfg.label_smoothing)
                val = float(loss.data)
                if not math.isfinite(val):
                    raise NumericalError(
                        f"non-finite loss {val} at epoch {epoch} step {res.steps}; "
                        f"batch shape {batch.ids.shape}, last loss {res.losses[-1:] or 'n/a'}"
                    )
                loss.backward()
                scale = 1.0
                if cfg.clip_norm:
                    gn = grad_norm(model)
                    if not math.isfinite(gn):
                        raise NumericalError(f"non-finite gradient norm at step {res.steps}")
                    if gn > cfg.clip_norm:
                        scale = cfg.clip_norm / gn
                opt.step(scale)
                res.losses.append(val)
                res.steps += 1
                if cfg.log_every and res.steps % cfg.log_every == 0:
                    log.info("epoch %d step %d loss %.4f", epoch, res.steps, float(np.mean(res.losses[-cfg.log_every:])))
                if max_steps is not None and res.steps >= max_steps:
                    break
                if cfg.max_minutes is not None and time.time() - start > 60 * cfg.max_minutes:
                    break
            res.epochs = epoch + 1
            res.seconds = time.time() - start
            if on_epoch is not None:
                on_epoch(epoch, res)
            if max_steps is not None and res.steps >= max_steps:
                break
            if cfg.max_minutes is not None and time.time() - start > 60 * cfg.max_minutes:
                log.info("time budget reached after %d epochs", epoch + 1)
                break
    finally:
        model._rng = None
    res.seconds = time.time() - start
    return res


# ---------------------------------------------------------------------------
# checkpoints: magic, version, JSON header, then named float32 tensor blocks

MAGIC = b"GKIECKPT"
VERSION = 1


def save_checkpoint(model: Model, path: str | Path, vocab_hash: str, extra: dict | None = None) -> None:
    names = list(model.params)
    header = {
        "config": asdict(model.config),
        "vocab_hash": vocab_hash,
        "tensors": names,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hb)))
        fh.write(hb)
        for name in names:
            arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(fh.read(n))


def load_checkpoint(path: str | Path, vocab_hash: str | None = None, config: ModelConfig | None = None) -> tuple[Model, dict]:
    """Read a checkpoint; refuses a vocab hash or model config that does not match."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(n))
        if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
            raise CheckpointError(f"{path}: vocab hash mismatch (checkpoint {header['vocab_hash'][:12]}, given {vocab_hash[:12]})")
        cfg = ModelConfig.from_dict(header["config"])
        if config is not None and asdict(config) != asdict(cfg):
            raise CheckpointError(f"{path}: model config mismatch")
        tensors: dict[str, np.ndarray] = {}
        for _ in header["tensors"]:
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode("utf-8")
            (nd,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{nd}I", fh.read(4 * nd)) if nd else ()
            count = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    model = Model(cfg, seed=0)
    if set(tensors) != set(model.params):
        raise CheckpointError(f"{path}: tensor set does not match the model config")
    for k, arr in tensors.items():
        if arr.shape != model.params[k].data.shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {arr.shape}, expected {model.params[k].data.shape}")
        model.params[k].data = arr
    return model, header
