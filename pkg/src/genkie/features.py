"""Textual, layout and visual embeddings and their fusion into the encoder input."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import Raster, RawBox
from .tokenizer import S_PROMPT, S_TRANSCRIPT, TokenSequence, Vocab

LAYOUT_BINS = 1024
EMPTY_LAYOUT = (0, 0, 0, 0, 0, 0)
LAYOUT_TABLES = ("lay_x0", "lay_x1", "lay_w", "lay_y0", "lay_y1", "lay_h")
IMAGE_SIZE = 480
POOL = 10  # fixed area-average stem: 480 -> 48 before the conv stages


class FeatureError(ValueError):
    pass


def normalize_bbox(raw: RawBox, page_w: int, page_h: int) -> tuple[int, int, int, int, int, int]:
    """Pixel box -> (x0, x1, w, y0, y1, h) discretized into [0, 1024)."""
    if page_w <= 0 or page_h <= 0:
        raise FeatureError(f"page size must be positive, got {page_w}x{page_h}")
    x0, y0, x1, y1 = raw
    if x0 > x1 or y0 > y1:
        raise FeatureError(f"inverted box {raw}")

    def q(c: float, size: int) -> int:
        return min(max(int(np.floor(c / size * LAYOUT_BINS)), 0), LAYOUT_BINS - 1)

    qx0, qx1 = q(x0, page_w), q(x1, page_w)
    qy0, qy1 = q(y0, page_h), q(y1, page_h)
    return (qx0, qx1, qx1 - qx0, qy0, qy1, qy1 - qy0)


def _find(hay: Sequence[int], needle: Sequence[int]) -> int:
    n = len(needle)
    for i in range(len(hay) - n + 1):
        if list(hay[i:i + n]) == list(needle):
            return i
    return -1


def assign_layouts(
    seq: TokenSequence,
    segment_layouts: Sequence[Sequence[int]],
    prompt_value: str | None = None,
    vocab: Vocab | None = None,
) -> np.ndarray:
    """Per-position layout features, shape (len(seq), 6).

    Transcript tokens take their segment's feature; special tokens and PAD
    take the empty feature. If ``prompt_value`` is given, its tokens inside
    the prompt inherit the features of the first transcript occurrence of the
    same token-id run, and keep the empty feature when there is none.
    """
    out = np.zeros((len(seq), 6), dtype=np.int64)
    for i, (sec, k) in enumerate(zip(seq.section, seq.segment)):
        if sec == S_TRANSCRIPT:
            out[i] = segment_layouts[k]
    if prompt_value and vocab is not None:
        needle = vocab.encode(" " + prompt_value.strip())
        t_pos = [i for i, s in enumerate(seq.section) if s == S_TRANSCRIPT]
        p_pos = [i for i, s in enumerate(seq.section) if s == S_PROMPT]
        t_ids = [seq.ids[i] for i in t_pos]
        p_ids = [seq.ids[i] for i in p_pos]
        pi = _find(p_ids, needle)
        ti = _find(t_ids, needle)
        if needle and pi >= 0 and ti >= 0:
            for j in range(len(needle)):
                out[p_pos[pi + j]] = out[t_pos[ti + j]]
    return out


# ---------------------------------------------------------------------------
# embeddings (operate on autograd tensors so the tables train)

def embed_text(tok: Tensor, pos: Tensor, ids: np.ndarray) -> Tensor:
    """TE[i] = tok[ids[i]] + pos[i]; ``ids`` is (L,) or (B, L)."""
    ids = np.asarray(ids)
    V = tok.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise FeatureError(f"token id out of range [0, {V})")
    L = ids.shape[-1]
    if L > pos.shape[0]:
        raise FeatureError(f"sequence length {L} exceeds positional table {pos.shape[0]}")
    return ag.add(ag.embedding(tok, ids), ag.embedding(pos, np.arange(L)))


def embed_layout(tables: Sequence[Tensor], features: np.ndarray) -> Tensor:
    """LE[i] = concat(Tx0[x0], Tx1[x1], Tw[w], Ty0[y0], Ty1[y1], Th[h])."""
    features = np.asarray(features)
    if features.shape[-1] != 6:
        raise FeatureError("layout features must have 6 components")
    if features.size and (features.min() < 0 or features.max() >= LAYOUT_BINS):
        raise FeatureError(f"layout component outside [0, {LAYOUT_BINS})")
    parts = [ag.embedding(t, features[..., c]) for c, t in enumerate(tables)]
    return ag.concat(parts, axis=-1)


def pool_image(raster: Raster) -> np.ndarray:
    """Ink density of a 480x480 raster averaged over 10x10 cells -> (48, 48) in [0, 1]."""
    if (raster.width, raster.height) != (IMAGE_SIZE, IMAGE_SIZE):
        raise FeatureError(f"visual encoder expects {IMAGE_SIZE}x{IMAGE_SIZE}, got {raster.width}x{raster.height}")
    ink = 1.0 - raster.pixels.astype(np.float32) / 255.0
    n = IMAGE_SIZE // POOL
    return ink.reshape(n, POOL, n, POOL).mean(axis=(1, 3))


_IM2COL: dict[tuple[int, int], np.ndarray] = {}


def _im2col_index(h: int, w: int) -> np.ndarray:
    """Gather index for a 3x3 / stride-2 / pad-1 conv over an (h*w + 1)-row map.

    Row ``h*w`` is an appended zero row standing in for the padding.
    """
    key = (h, w)
    if key not in _IM2COL:
        ho, wo = (h + 1) // 2, (w + 1) // 2
        idx = np.full((ho * wo, 9), h * w, dtype=np.int64)
        for r in range(ho):
            for c in range(wo):
                for k, (dr, dc) in enumerate((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)):
                    rr, cc = 2 * r + dr, 2 * c + dc
                    if 0 <= rr < h and 0 <= cc < w:
                        idx[r * wo + c, k] = rr * w + cc
        _IM2COL[key] = idx
    return _IM2COL[key]


def conv_stage(x: Tensor, hw: tuple[int, int], weight: Tensor, bias: Tensor) -> tuple[Tensor, tuple[int, int]]:
    """3x3 stride-2 conv + GELU on a row-major map ``x`` of shape (B, h*w, C)."""
    h, w = hw
    B, _, C = x.shape
    zero = Tensor(np.zeros((B, 1, C), dtype=x.data.dtype))
    padded = ag.concat([x, zero], axis=1)
    idx = _im2col_index(h, w)
    cols = ag.gather(padded, idx, axis=1)  # (B, ho*wo, 9, C)
    cols = ag.reshape(cols, (B, idx.shape[0], 9 * C))
    out = ag.gelu(ag.linear(cols, weight, bias))
    return out, ((h + 1) // 2, (w + 1) // 2)


def embed_visual(convs: Sequence[tuple[Tensor, Tensor]], proj: Tensor, pos: Tensor, pooled: np.ndarray) -> Tensor:
    """VE[i] = Q[i] W + pos[i] where Q is the flattened conv feature map.

    ``pooled`` is (B, 48, 48) (see :func:`pool_image`); three stride-2 stages
    give a 6x6 map, i.e. K = 36 visual tokens of dimension d_img.
    """
    pooled = np.asarray(pooled)
    if pooled.ndim == 2:
        pooled = pooled[None]
    B, h, w = pooled.shape
    x = Tensor(pooled.reshape(B, h * w, 1).astype(proj.data.dtype))
    hw = (h, w)
    for weight, bias in convs:
        x, hw = conv_stage(x, hw, weight, bias)
    K = hw[0] * hw[1]
    if K > pos.shape[0]:
        raise FeatureError(f"{K} visual tokens exceed positional table {pos.shape[0]}")
    q = ag.linear(x, proj)
    return ag.add(q, ag.embedding(pos, np.arange(K)))


def fuse(ve: Tensor | None, te: Tensor, le: Tensor | None, use_layout: bool = True, use_visual: bool = True) -> Tensor:
    """E = concat_rows(VE, TE + LE); the flags drop VE and/or zero LE."""
    if le is not None and le.shape != te.shape:
        raise FeatureError(f"text {te.shape} and layout {le.shape} embeddings differ in shape")
    x = ag.add(te, le) if (use_layout and le is not None) else te
    if not use_visual or ve is None:
        return x
    if ve.shape[-1] != te.shape[-1] or ve.data.ndim != te.data.ndim:
        raise FeatureError(f"visual {ve.shape} and text {te.shape} embeddings do not concatenate")
    return ag.concat([ve, x], axis=-2)
