"""Generative key-information extraction from scanned-document transcripts.

A desk-scale, dependency-light pipeline: synthetic receipts, byte-level BPE,
text + layout + visual embeddings, an encoder-decoder Transformer trained with
a small reverse-mode autodiff engine, prompt-driven generation with
prefix-constrained beam search, and an evaluation harness.
"""

__version__ = "0.1.0"

DEFAULT_SCHEMA = ("company", "address", "date", "total")
