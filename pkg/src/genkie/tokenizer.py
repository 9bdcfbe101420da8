"""Byte-level BPE and encoder input assembly."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

PAD, BEG, END, SEP = "[PAD]", "[BEG]", "[END]", "[SEP]"
RESERVED = (PAD, BEG, END, SEP)
PAD_ID, BEG_ID, END_ID, SEP_ID = range(4)
N_RESERVED = len(RESERVED)
BYTE_OFFSET = N_RESERVED

# section tags
S_BEG, S_TRANSCRIPT, S_SEP, S_PROMPT, S_END, S_PAD = "BEG", "TRANSCRIPT", "SEP", "PROMPT", "END", "PAD"

_CHUNK = re.compile(rb" ?[^\s]+|\s+")
_MAGIC = "#genkie-bpe v1"


class TokenizerError(ValueError):
    pass


@dataclass
class Vocab:
    merges: list[tuple[bytes, bytes]]
    _ranks: dict[tuple[bytes, bytes], int] = field(init=False, repr=False)
    _ids: dict[bytes, int] = field(init=False, repr=False)
    _tokens: list[bytes] = field(init=False, repr=False)
    _cache: dict[bytes, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._tokens = [bytes([b]) for b in range(256)]
        self._ranks = {}
        for rank, (a, b) in enumerate(self.merges):
            self._ranks[(a, b)] = rank
            self._tokens.append(a + b)
        self._ids = {tok: i + BYTE_OFFSET for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise TokenizerError("merge list produces duplicate tokens")
        self._cache = {}

    def __len__(self) -> int:
        return N_RESERVED + len(self._tokens)

    @property
    def size(self) -> int:
        return len(self)

    def token_bytes(self, idx: int) -> bytes:
        if idx < N_RESERVED:
            return RESERVED[idx].encode()
        return self._tokens[idx - BYTE_OFFSET]

    def token_str(self, idx: int) -> str:
        return self.token_bytes(idx).decode("utf-8", errors="replace")

    def _encode_chunk(self, chunk: bytes) -> tuple[int, ...]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        parts = [bytes([b]) for b in chunk]
        while len(parts) > 1:
            best = None
            best_rank = None
            for i in range(len(parts) - 1):
                r = self._ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            parts[best:best + 2] = [parts[best] + parts[best + 1]]
        ids = tuple(self._ids[p] for p in parts)
        if len(self._cache) < 200_000:
            self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for m in _CHUNK.finditer(text.encode("utf-8")):
            out.extend(self._encode_chunk(m.group()))
        return out

    def decode(self, ids: Sequence[int]) -> str:
        buf = bytearray()
        for i in ids:
            buf += self.token_bytes(int(i))
        return buf.decode("utf-8", errors="replace")

    def encode_marked(self, text: str) -> list[int]:
        """Encode prompt/target text where the literal ``[SEP]`` is the reserved token.

        Every piece is encoded with a leading space so words get the same ids
        as in transcripts (where each segment is also space-prefixed).
        """
        out: list[int] = []
        pieces = text.split(SEP)
        for k, piece in enumerate(pieces):
            piece = piece.strip()
            if piece:
                out.extend(self.encode(" " + piece))
            if k < len(pieces) - 1:
                out.append(SEP_ID)
        return out

    def decode_marked(self, ids: Sequence[int]) -> str:
        """Inverse of :meth:`encode_marked` up to whitespace; drops BEG/END/PAD."""
        parts: list[str] = []
        run: list[int] = []
        for i in ids:
            i = int(i)
            if i == SEP_ID:
                parts.append(self.decode(run).strip())
                parts.append(SEP)
                run = []
            elif i >= N_RESERVED:
                run.append(i)
        parts.append(self.decode(run).strip())
        return " ".join(p for p in parts if p)

    def serialize(self) -> str:
        lines = [_MAGIC, *RESERVED, "--"]
        lines += [f"{a.hex()} {b.hex()}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != _MAGIC:
            raise TokenizerError(f"{path}: not a vocab file")
        if tuple(lines[1:1 + N_RESERVED]) != RESERVED or lines[1 + N_RESERVED] != "--":
            raise TokenizerError(f"{path}: unexpected reserved-token block")
        merges = []
        for n, line in enumerate(lines[2 + N_RESERVED:], 3 + N_RESERVED):
            try:
                a, b = line.split(" ")
                merges.append((bytes.fromhex(a), bytes.fromhex(b)))
            except ValueError as exc:
                raise TokenizerError(f"{path}:{n}: bad merge line {line!r}") from exc
        return cls(merges)


def train_bpe(texts: Sequence[str], vocab_size: int) -> Vocab:
    """Learn merges greedily by pair frequency; ties go to the lexicographically smallest pair.

    ``vocab_size`` counts byte and merge tokens; the four reserved tokens come
    on top of it.
    """
    if vocab_size <= 256:
        raise TokenizerError(f"vocab_size must exceed 256, got {vocab_size}")
    chunks: Counter[bytes] = Counter()
    for t in texts:
        for m in _CHUNK.finditer(t.encode("utf-8")):
            chunks[m.group()] += 1
    if not chunks:
        raise TokenizerError("cannot train BPE on an empty corpus")

    words = [[bytes([b]) for b in c] for c in chunks]
    freqs = list(chunks.values())
    pair_counts: Counter[tuple[bytes, bytes]] = Counter()
    where: dict[tuple[bytes, bytes], set[int]] = {}
    for wi, (w, f) in enumerate(zip(words, freqs)):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += f
            where.setdefault(pair, set()).add(wi)

    merges: list[tuple[bytes, bytes]] = []
    known = {bytes([b]) for b in range(256)}
    while len(merges) < vocab_size - 256 and pair_counts:
        top = max(pair_counts.values())
        if top <= 0:
            break
        best = min(p for p, c in pair_counts.items() if c == top)
        merged = best[0] + best[1]
        if merged in known:
            # an equal token already exists via another merge path; retire the pair
            del pair_counts[best]
            continue
        merges.append(best)
        known.add(merged)
        for wi in sorted(where.pop(best, ())):
            w, f = words[wi], freqs[wi]
            for pair in zip(w, w[1:]):
                pair_counts[pair] -= f
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            nw: list[bytes] = []
            i = 0
            while i < len(w):
                if i < len(w) - 1 and (w[i], w[i + 1]) == best:
                    nw.append(merged)
                    i += 2
                else:
                    nw.append(w[i])
                    i += 1
            words[wi] = nw
            for pair in zip(nw, nw[1:]):
                pair_counts[pair] += f
                where.setdefault(pair, set()).add(wi)
    return Vocab(merges)


@dataclass
class TokenSequence:
    ids: list[int]
    mask: list[bool]
    section: list[str]
    segment: list[int]  # segment index for transcript tokens, -1 elsewhere

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def length(self) -> int:
        """Number of non-PAD positions."""
        return sum(self.mask)


def build_input_sequence(
    transcript: str | Sequence[str],
    prompt: str,
    vocab: Vocab,
    max_len: int = 1024,
    pad_to: int | None = None,
) -> TokenSequence:
    """Assemble ``[BEG] BPE(T) [SEP] BPE(P) [END] [PAD]*``.

    ``transcript`` may be the list of segment texts (so each token knows its
    segment). Overlong transcripts are cut from the right; the prompt is never
    truncated. Padding runs up to ``pad_to`` (default: no padding).
    """
    if not prompt.strip():
        raise TokenizerError("prompt must be non-empty")
    if isinstance(transcript, str):
        segs = [transcript] if transcript.strip() else []
    else:
        segs = list(transcript)
    p_ids = vocab.encode_marked(prompt)
    budget = max_len - 3 - len(p_ids)
    if budget < 0:
        raise TokenizerError(f"prompt of {len(p_ids)} tokens does not fit max_len={max_len}")

    t_ids: list[int] = []
    t_seg: list[int] = []
    for k, s in enumerate(segs):
        ids = vocab.encode(" " + s.strip())
        t_ids.extend(ids)
        t_seg.extend([k] * len(ids))
        if len(t_ids) >= budget:
            break
    t_ids, t_seg = t_ids[:budget], t_seg[:budget]

    ids = [BEG_ID, *t_ids, SEP_ID, *p_ids, END_ID]
    section = [S_BEG] + [S_TRANSCRIPT] * len(t_ids) + [S_SEP] + [S_PROMPT] * len(p_ids) + [S_END]
    segment = [-1] + t_seg + [-1] * (len(p_ids) + 2)
    n_pad = 0 if pad_to is None else max(0, min(pad_to, max_len) - len(ids))
    return TokenSequence(
        ids=ids + [PAD_ID] * n_pad,
        mask=[True] * len(ids) + [False] * n_pad,
        section=section + [S_PAD] * n_pad,
        segment=segment + [-1] * n_pad,
    )
