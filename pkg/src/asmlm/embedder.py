"""Instruction and basic-block embeddings from a trained model.

An instruction embedding is the mean of the second-last layer's hidden
states over the instruction's own token positions ([CLS]/[SEP]/[PAD]
excluded); a block embedding is the mean of its instruction embeddings.
The exported lookup table is keyed by normalized token strings, so
instructions differing only in large constants share an entry.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import BasicBlock, DisasmCorpus
from .errors import MalformedRecord
from .model import TransformerParams, forward
from .sampler import MaskedBatch
from .tokenizer import (CLS_ID, PAD_ID, SEP_ID, Vocabulary, instruction_key)

TABLE_MAGIC = b"ASMT"
TABLE_VERSION = 1

_EMBED_CHUNK = 256


@dataclass
class InstructionEmbedding:
    vector: np.ndarray
    source_text: str


@dataclass
class EmbeddingTable:
    entries: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return next(iter(self.entries.values())).shape[0] if self.entries else 0

    def lookup(self, text: str) -> np.ndarray | None:
        """None when the instruction is absent (the caller's OOV case)."""
        return self.entries.get(instruction_key(text))


def _ids_for_key(key: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id_of(s) for s in key.split(" ")]


def _embed_id_rows(params: TransformerParams, rows: list[list[int]]) -> np.ndarray:
    """Second-last-layer mean over instruction token positions, batched."""
    cfg = params.config
    budget = cfg.max_len - 2
    rows = [r[:budget] for r in rows]
    t_len = max(len(r) for r in rows) + 2
    n = len(rows)
    ids = np.full((n, t_len), PAD_ID, dtype=np.int64)
    amask = np.zeros((n, t_len), dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, 0] = CLS_ID
        ids[i, 1:1 + len(r)] = r
        ids[i, 1 + len(r)] = SEP_ID
        amask[i, :len(r) + 2] = 1
    batch = MaskedBatch(ids, np.zeros_like(ids), amask,
                        np.full_like(ids, -1),
                        np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))
    out = forward(params, batch, train_mode=False)
    hidden = out.hidden_states[cfg.num_layers - 1]  # second-last layer
    vectors = np.empty((n, cfg.hidden_dim))
    for i, r in enumerate(rows):
        vectors[i] = hidden[i, 1:1 + len(r)].mean(axis=0)
    return vectors


def embed_instruction(params: TransformerParams, text: str,
                      vocab: Vocabulary) -> InstructionEmbedding:
    key = instruction_key(text)
    vec = _embed_id_rows(params, [_ids_for_key(key, vocab)])[0]
    return InstructionEmbedding(vec, text)


def embed_keys(params: TransformerParams, keys, vocab: Vocabulary) -> dict:
    """Embed many normalized-instruction keys, chunked for throughput."""
    keys = list(keys)
    result = {}
    for lo in range(0, len(keys), _EMBED_CHUNK):
        chunk = keys[lo:lo + _EMBED_CHUNK]
        vecs = _embed_id_rows(params, [_ids_for_key(k, vocab) for k in chunk])
        result.update(zip(chunk, vecs))
    return result


def embed_block(params: TransformerParams, block: BasicBlock,
                vocab: Vocabulary, cache: dict | None = None) -> np.ndarray:
    """Mean of the block's instruction embeddings; `cache` maps
    normalized keys to vectors and is filled on demand."""
    keys = [instruction_key(i.text) for i in block.instructions]
    if cache is None:
        cache = {}
    missing = sorted(set(k for k in keys if k not in cache))
    if missing:
        cache.update(embed_keys(params, missing, vocab))
    return np.mean([cache[k] for k in keys], axis=0)


def export_table(params: TransformerParams, corpus: DisasmCorpus,
                 vocab: Vocabulary, top_n: int,
                 metadata: dict | None = None) -> EmbeddingTable:
    """Static lookup table over the top_n most frequent normalized
    instruction texts (ties broken lexicographically)."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    counts = Counter(instruction_key(i.text) for i in corpus.all_instructions())
    ranked = sorted(counts, key=lambda k: (-counts[k], k))[:top_n]
    entries = embed_keys(params, ranked, vocab)
    meta = {"hidden_dim": params.config.hidden_dim}
    if metadata:
        meta.update(metadata)
    return EmbeddingTable({k: entries[k] for k in ranked}, meta)


def write_table(path, table: EmbeddingTable) -> None:
    """Binary table: "ASMT", u32 version, u32 dim, u32 count, then
    length-prefixed UTF-8 key + dim little-endian f64 per entry."""
    dim = table.dim
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<III", TABLE_VERSION, dim, len(table.entries)))
        for key, vec in table.entries.items():
            raw = key.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def read_table(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TABLE_MAGIC:
        raise MalformedRecord(0, "bad magic in embedding table")
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != TABLE_VERSION:
        raise MalformedRecord(0, f"unsupported table version {version}")
    entries, off = {}, 16
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", data, off)
        off += 4
        key = data[off:off + klen].decode("utf-8")
        off += klen
        vec = np.frombuffer(data, dtype="<f8", count=dim, offset=off).copy()
        off += 8 * dim
        entries[key] = vec
    return EmbeddingTable(entries, {"hidden_dim": dim})
