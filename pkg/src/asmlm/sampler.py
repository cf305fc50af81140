"""Training-pair generation and masking.

Two pair kinds are produced from a corpus: context-window pairs (CWP,
two instructions of the same basic block at most `window` apart, versus
a random distractor) and def-use pairs (DUP, a def/use instruction pair
in original or swapped order).  Masking corrupts 15% of the non-special
token positions of an assembled [CLS] a [SEP] b [SEP] row, BERT style:
80% [MASK], 10% random token, 10% kept.

All sampling is driven by numpy Generators seeded from explicit integer
seeds, so the same (corpus, config, seed) reproduces identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .corpus import DisasmCorpus
from .errors import InsufficientCorpus, MalformedRecord, NoDefUseEdges
from .tokenizer import (CLS_ID, MASK_ID, NUM_RESERVED, PAD_ID, SEP_ID,
                        Vocabulary, encode_instruction)

TASK_CWP = 0
TASK_DUP = 1
TASK_NAMES = {TASK_CWP: "CWP", TASK_DUP: "DUP"}

MASK_RATE = 0.15
MASK_FRACTION = 0.8      # of selected positions: replaced by [MASK]
RANDOM_FRACTION = 0.1    # of selected positions: replaced by a random token

SAMPLES_MAGIC = b"ASMS"
SAMPLES_VERSION = 1


@dataclass(frozen=True)
class PairSample:
    first: tuple[int, ...]
    second: tuple[int, ...]
    task: int  # TASK_CWP or TASK_DUP
    label: bool


@dataclass
class MaskedBatch:
    input_ids: np.ndarray      # [B, max_len] int64
    segment_ids: np.ndarray    # [B, max_len] int64, 0/1
    attention_mask: np.ndarray  # [B, max_len] int64, 1 = real token
    mlm_targets: np.ndarray    # [B, max_len] int64, original id or -1
    task_labels: np.ndarray    # [B] int64
    task_kinds: np.ndarray     # [B] int64

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]


class _EncodedCorpus:
    """Per-block encoded instruction sequences plus a flat index."""

    def __init__(self, corpus: DisasmCorpus, vocab: Vocabulary):
        self.blocks: list[list[tuple[int, ...]]] = []  # encoded ids per block
        self.flat: list[tuple[int, int]] = []          # (block_idx, pos)
        self.edges: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        for fn in corpus.functions:
            by_addr = {}
            for block in fn.blocks:
                encoded = [tuple(encode_instruction(i.text, vocab))
                           for i in block.instructions]
                bidx = len(self.blocks)
                self.blocks.append(encoded)
                self.flat.extend((bidx, pos) for pos in range(len(encoded)))
                for insn, ids in zip(block.instructions, encoded):
                    by_addr[insn.address] = ids
            for edge in fn.def_use:
                self.edges.append((by_addr[edge.def_addr], by_addr[edge.use_addr]))

    def ids_at(self, bidx: int, pos: int) -> tuple[int, ...]:
        return self.blocks[bidx][pos]


def sample_cwp_pairs(corpus: DisasmCorpus, window: int, n: int, seed: int,
                     vocab: Vocabulary) -> list[PairSample]:
    """n context-window pairs, alternating positive/negative labels.

    Positives pair an instruction with a later one at most `window`
    positions away in the same block; negatives pair it with a uniformly
    random instruction outside its own window.
    """
    if window < 1 or n < 1:
        raise ValueError("window and n must be >= 1")
    enc = _EncodedCorpus(corpus, vocab)
    anchors = [(b, i) for b, block in enumerate(enc.blocks)
               for i in range(len(block) - 1)]
    if not anchors:
        raise InsufficientCorpus("no basic block has two or more instructions")
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n):
        positive = k % 2 == 0
        if positive:
            bidx, i = anchors[rng.integers(len(anchors))]
            hi = min(i + window, len(enc.blocks[bidx]) - 1)
            j = int(rng.integers(i + 1, hi + 1))
            samples.append(PairSample(enc.ids_at(bidx, i), enc.ids_at(bidx, j),
                                      TASK_CWP, True))
        else:
            for attempt in range(10_000):
                bidx, i = enc.flat[rng.integers(len(enc.flat))]
                cb, cj = enc.flat[rng.integers(len(enc.flat))]
                if cb != bidx or abs(cj - i) > window:
                    break
            else:
                raise InsufficientCorpus(
                    "could not draw an out-of-window distractor pair")
            samples.append(PairSample(enc.ids_at(bidx, i), enc.ids_at(cb, cj),
                                      TASK_CWP, False))
    return samples


def sample_dup_pairs(corpus: DisasmCorpus, n: int, seed: int,
                     vocab: Vocabulary) -> list[PairSample]:
    """n def-use pairs; each is a uniformly drawn edge, emitted in
    (def, use) order with label True or swapped with label False."""
    if n < 1:
        raise ValueError("n must be >= 1")
    enc = _EncodedCorpus(corpus, vocab)
    if not enc.edges:
        raise NoDefUseEdges("corpus carries no def-use edges")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        d, u = enc.edges[rng.integers(len(enc.edges))]
        if rng.random() < 0.5:
            samples.append(PairSample(d, u, TASK_DUP, True))
        else:
            samples.append(PairSample(u, d, TASK_DUP, False))
    return samples


def _truncate(first: list[int], second: list[int], max_len: int):
    budget = max_len - 3  # [CLS] and two [SEP]
    while len(first) + len(second) > budget:
        if len(first) >= len(second):
            first.pop()
        else:
            second.pop()
    return first, second


def apply_mlm_masking(pairs, vocab: Vocabulary, max_len: int, seed: int,
                      mask_rate: float = MASK_RATE) -> MaskedBatch:
    """Assemble pairs into a padded batch and apply MLM corruption."""
    if max_len < 8:
        raise ValueError("max_len must be >= 8")
    rng = np.random.default_rng(seed)
    batch = len(pairs)
    input_ids = np.full((batch, max_len), PAD_ID, dtype=np.int64)
    segment_ids = np.zeros((batch, max_len), dtype=np.int64)
    attention_mask = np.zeros((batch, max_len), dtype=np.int64)
    mlm_targets = np.full((batch, max_len), -1, dtype=np.int64)
    task_labels = np.zeros(batch, dtype=np.int64)
    task_kinds = np.zeros(batch, dtype=np.int64)

    k = vocab.size
    for r, pair in enumerate(pairs):
        first, second = _truncate(list(pair.first), list(pair.second), max_len)
        row = [CLS_ID] + first + [SEP_ID] + second + [SEP_ID]
        length = len(row)
        input_ids[r, :length] = row
        segment_ids[r, len(first) + 2:length] = 1
        attention_mask[r, :length] = 1
        task_labels[r] = int(pair.label)
        task_kinds[r] = pair.task

        # maskable positions: everything but [CLS]/[SEP]/[PAD]
        positions = np.array([p for p in range(length)
                              if row[p] not in (CLS_ID, SEP_ID)], dtype=np.int64)
        if positions.size == 0:
            continue
        selected = positions[rng.random(positions.size) < mask_rate]
        if selected.size == 0:
            continue
        mlm_targets[r, selected] = input_ids[r, selected]
        roll = rng.random(selected.size)
        to_mask = selected[roll < MASK_FRACTION]
        to_random = selected[(roll >= MASK_FRACTION)
                             & (roll < MASK_FRACTION + RANDOM_FRACTION)]
        input_ids[r, to_mask] = MASK_ID
        if to_random.size:
            input_ids[r, to_random] = rng.integers(NUM_RESERVED, k,
                                                   size=to_random.size)
    return MaskedBatch(input_ids, segment_ids, attention_mask,
                       mlm_targets, task_labels, task_kinds)


def write_samples(path, samples) -> None:
    """Binary sample file: "ASMS" magic, u32 version, then per record
    task u8, label u8, len1 u16, len2 u16 and the ids as u32 (LE)."""
    with open(path, "wb") as fh:
        fh.write(SAMPLES_MAGIC)
        fh.write(struct.pack("<I", SAMPLES_VERSION))
        for s in samples:
            fh.write(struct.pack("<BBHH", s.task, int(s.label),
                                 len(s.first), len(s.second)))
            fh.write(struct.pack(f"<{len(s.first) + len(s.second)}I",
                                 *(s.first + s.second)))


def read_samples(path) -> list[PairSample]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SAMPLES_MAGIC:
        raise MalformedRecord(0, "bad magic in samples file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != SAMPLES_VERSION:
        raise MalformedRecord(0, f"unsupported samples version {version}")
    samples, off = [], 8
    while off < len(data):
        task, label, len1, len2 = struct.unpack_from("<BBHH", data, off)
        off += 6
        ids = struct.unpack_from(f"<{len1 + len2}I", data, off)
        off += 4 * (len1 + len2)
        samples.append(PairSample(ids[:len1], ids[len1:], task, bool(label)))
    return samples


def batch_stream(samples, vocab: Vocabulary, batch_size: int, max_len: int,
                 seed: int, steps: int, mask_rate: float = MASK_RATE,
                 start_step: int = 0):
    """Yield batches for steps start_step..steps-1, homogeneous per step
    and alternating CWP and DUP 1:1.

    Each step draws its rows and its masking from a Generator keyed by
    (seed, step), so a resumed run regenerates the identical stream.
    """
    pools = {TASK_CWP: [s for s in samples if s.task == TASK_CWP],
             TASK_DUP: [s for s in samples if s.task == TASK_DUP]}
    kinds = [kind for kind in (TASK_CWP, TASK_DUP) if pools[kind]]
    if not kinds:
        raise InsufficientCorpus("no samples to batch")
    for step in range(start_step, steps):
        kind = kinds[step % len(kinds)]
        pool = pools[kind]
        rng = np.random.default_rng([seed, step])
        rows = [pool[i] for i in rng.integers(len(pool), size=batch_size)]
        yield apply_mlm_masking(rows, vocab, max_len,
                                seed=np.random.SeedSequence([seed, step, 1]),
                                mask_rate=mask_rate)
