"""Disassembly interchange-format ingestion.

One JSON object per line, one object per function:

    {"binary_id": str, "function": str,
     "blocks": [{"id": str, "instructions": [{"addr": uint, "text": str}],
                 "succs": [str]}],
     "def_use": [{"def": uint, "use": uint}]}

Addresses are opaque keys; def-use edges are consumed as given, never
recomputed, and may cross basic blocks.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

from .errors import DanglingReference, EmptyCorpus, MalformedRecord

log = logging.getLogger("asmlm.corpus")

_FUNCTION_KEYS = {"binary_id", "function", "blocks", "def_use"}
_BLOCK_KEYS = {"id", "instructions", "succs"}
_INSN_KEYS = {"addr", "text"}
_EDGE_KEYS = {"def", "use"}


@dataclass(frozen=True)
class Instruction:
    address: int
    text: str
    block_id: str
    index_in_block: int


@dataclass(frozen=True)
class BasicBlock:
    id: str
    instructions: tuple[Instruction, ...]
    successors: frozenset[str]


@dataclass(frozen=True)
class DefUseEdge:
    def_addr: int
    use_addr: int


@dataclass(frozen=True)
class Function:
    binary_id: str
    name: str
    blocks: tuple[BasicBlock, ...]
    def_use: tuple[DefUseEdge, ...]

    def instructions(self):
        for block in self.blocks:
            yield from block.instructions

    def instruction_by_addr(self, addr: int) -> Instruction | None:
        for insn in self.instructions():
            if insn.address == addr:
                return insn
        return None


@dataclass(frozen=True)
class DisasmCorpus:
    functions: tuple[Function, ...]

    def all_instructions(self):
        for fn in self.functions:
            yield from fn.instructions()

    @property
    def num_functions(self) -> int:
        return len(self.functions)

    @property
    def num_blocks(self) -> int:
        return sum(len(fn.blocks) for fn in self.functions)

    @property
    def num_instructions(self) -> int:
        return sum(len(b.instructions) for fn in self.functions for b in fn.blocks)

    @property
    def num_def_use_edges(self) -> int:
        return sum(len(fn.def_use) for fn in self.functions)


@dataclass
class StatsReport:
    functions: int
    blocks: int
    instructions: int
    def_use_edges: int
    block_length_histogram: dict[int, int] = field(default_factory=dict)


def _require(cond: bool, line_no: int, reason: str) -> None:
    if not cond:
        raise MalformedRecord(line_no, reason)


def _warn_unknown(obj: dict, known: set, line_no: int, where: str) -> None:
    extra = set(obj) - known
    if extra:
        log.warning("line %d: ignoring unknown %s field(s) %s",
                    line_no, where, sorted(extra))


def _parse_function(obj: dict, line_no: int) -> Function:
    _require(isinstance(obj, dict), line_no, "record is not a JSON object")
    _warn_unknown(obj, _FUNCTION_KEYS, line_no, "function")
    for key in ("binary_id", "function", "blocks"):
        _require(key in obj, line_no, f"missing field {key!r}")
    _require(isinstance(obj["binary_id"], str), line_no, "binary_id must be a string")
    _require(isinstance(obj["function"], str), line_no, "function must be a string")
    _require(isinstance(obj["blocks"], list) and obj["blocks"], line_no,
             "blocks must be a non-empty array")

    blocks = []
    seen_ids = set()
    addr_to_block: dict[int, str] = {}
    for b in obj["blocks"]:
        _require(isinstance(b, dict), line_no, "block is not an object")
        _warn_unknown(b, _BLOCK_KEYS, line_no, "block")
        for key in ("id", "instructions"):
            _require(key in b, line_no, f"block missing field {key!r}")
        bid = b["id"]
        _require(isinstance(bid, str), line_no, "block id must be a string")
        _require(bid not in seen_ids, line_no, f"duplicate block id {bid!r}")
        seen_ids.add(bid)
        _require(isinstance(b["instructions"], list) and b["instructions"], line_no,
                 f"block {bid!r}: instructions must be a non-empty array")
        insns = []
        for i, rec in enumerate(b["instructions"]):
            _require(isinstance(rec, dict), line_no, "instruction is not an object")
            _warn_unknown(rec, _INSN_KEYS, line_no, "instruction")
            _require("addr" in rec and "text" in rec, line_no,
                     "instruction needs 'addr' and 'text'")
            addr, text = rec["addr"], rec["text"]
            _require(isinstance(addr, int) and addr >= 0, line_no,
                     "addr must be an unsigned integer")
            _require(isinstance(text, str) and text and "\n" not in text, line_no,
                     "text must be a non-empty single-line string")
            insns.append(Instruction(addr, text, bid, i))
            addr_to_block[addr] = bid
        succs = b.get("succs", [])
        _require(isinstance(succs, list), line_no, "succs must be an array")
        blocks.append(BasicBlock(bid, tuple(insns), frozenset(succs)))

    for block in blocks:
        for s in block.successors:
            if s not in seen_ids:
                raise DanglingReference(
                    f"line {line_no}: block {block.id!r} has unknown successor {s!r}")

    addrs = {i.address for b in blocks for i in b.instructions}
    edges = []
    for e in obj.get("def_use", []):
        _require(isinstance(e, dict), line_no, "def_use entry is not an object")
        _warn_unknown(e, _EDGE_KEYS, line_no, "def_use")
        _require("def" in e and "use" in e, line_no, "def_use entry needs 'def' and 'use'")
        d, u = e["def"], e["use"]
        _require(isinstance(d, int) and isinstance(u, int), line_no,
                 "def/use must be integers")
        _require(d != u, line_no, "def and use address must differ")
        for addr in (d, u):
            if addr not in addrs:
                raise DanglingReference(
                    f"line {line_no}: def-use address {addr} does not resolve "
                    f"to an instruction in function {obj['function']!r}")
        edges.append(DefUseEdge(d, u))

    return Function(obj["binary_id"], obj["function"], tuple(blocks), tuple(edges))


def load_corpus(path) -> DisasmCorpus:
    """Read and validate a JSON-Lines disassembly file."""
    functions = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc}") from exc
            functions.append(_parse_function(obj, line_no))
    if not functions:
        raise EmptyCorpus(f"{path}: no function records")
    corpus = DisasmCorpus(tuple(functions))
    log.info("loaded %s: %d functions, %d blocks, %d instructions, %d def-use edges",
             path, corpus.num_functions, corpus.num_blocks,
             corpus.num_instructions, corpus.num_def_use_edges)
    return corpus


def loads_corpus(text: str) -> DisasmCorpus:
    """Like load_corpus but from an in-memory JSON-Lines string."""
    functions = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(line_no, f"invalid JSON: {exc}") from exc
        functions.append(_parse_function(obj, line_no))
    if not functions:
        raise EmptyCorpus("no function records")
    return DisasmCorpus(tuple(functions))


def serialize(corpus: DisasmCorpus) -> str:
    """Render a corpus back to the interchange format (inverse of load)."""
    lines = []
    for fn in corpus.functions:
        obj = {
            "binary_id": fn.binary_id,
            "function": fn.name,
            "blocks": [
                {
                    "id": b.id,
                    "instructions": [{"addr": i.address, "text": i.text}
                                     for i in b.instructions],
                    "succs": sorted(b.successors),
                }
                for b in fn.blocks
            ],
            "def_use": [{"def": e.def_addr, "use": e.use_addr} for e in fn.def_use],
        }
        lines.append(json.dumps(obj))
    return "\n".join(lines) + "\n"


def split_by_function(corpus: DisasmCorpus, heldout_fraction: float,
                      seed: int) -> tuple[DisasmCorpus, DisasmCorpus]:
    """Function-disjoint (train, heldout) split: all records sharing a
    function name land on the same side, whatever binary they came from."""
    import numpy as np

    names = sorted({fn.name for fn in corpus.functions})
    rng = np.random.default_rng(seed)
    n_held = max(1, int(round(len(names) * heldout_fraction)))
    held = set(np.array(names)[rng.permutation(len(names))[:n_held]])
    train = tuple(fn for fn in corpus.functions if fn.name not in held)
    heldout = tuple(fn for fn in corpus.functions if fn.name in held)
    if not train:
        raise EmptyCorpus("heldout fraction leaves no training functions")
    return DisasmCorpus(train), DisasmCorpus(heldout)


def corpus_stats(corpus: DisasmCorpus) -> StatsReport:
    hist = Counter(len(b.instructions) for fn in corpus.functions for b in fn.blocks)
    return StatsReport(
        functions=corpus.num_functions,
        blocks=corpus.num_blocks,
        instructions=corpus.num_instructions,
        def_use_edges=corpus.num_def_use_edges,
        block_length_histogram=dict(sorted(hist.items())),
    )
