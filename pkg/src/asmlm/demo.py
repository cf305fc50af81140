"""Synthetic demo corpus for smoke tests and the scaled-down experiments.

Templated x86-64 functions in two build variants ("O1"/"O2") of the same
sources: the O2 variant rotates registers inside the function's register
theme, drops or swaps an instruction, and relocates addresses. Matching
block pairs across variants form the ground-truth equivalence classes
for basic-block search.

Each function sticks to one register theme and one constant range, so
context (CWP) and def-use order (DUP) carry learnable signal at desk
scale. Def-use edges connect producer instructions (loads, lea) to the
consumers that read the produced register, including across blocks.
"""

from __future__ import annotations

import json

import numpy as np

REG_THEMES = [
    ["rax", "rbx", "rcx"],
    ["rdx", "rsi", "rdi"],
    ["r8", "r9", "r10"],
    ["r11", "r12", "r13"],
]

PRODUCERS = ("mov_const", "mov_load", "mov_global", "lea")
ARITH = ("add", "sub", "xor", "and")
UNARY = ("inc", "dec", "neg", "not")
SHIFT = ("shl", "shr", "sar", "sal")
JUMPS = ("jmp", "je", "jne", "jg", "jle", "jb")
CALL_TARGETS = ("memcpy", "memset", "strlen", "malloc", "free")

BLOCK_KINDS = ("load_arith", "compare_branch", "call_frame", "unary_shift")


class _Emitter:
    """Accumulates one function's instructions, edges and CFG."""

    def __init__(self, next_addr: int, call_target: int = 0):
        self.addr = next_addr
        self.call_target = call_target
        self.blocks = []
        self.cur = None
        self.edges = []
        self.last_writer = {}  # register -> producer address

    def begin_block(self, bid: str):
        self.cur = {"id": bid, "instructions": [], "succs": []}
        self.blocks.append(self.cur)

    def emit(self, text: str, defines=None, uses=()):
        addr = self.addr
        self.addr += 4
        self.cur["instructions"].append({"addr": addr, "text": text})
        for reg in uses:
            if reg in self.last_writer:
                self.edges.append({"def": self.last_writer[reg], "use": addr})
        if defines:
            self.last_writer[defines] = addr
        return addr

    def clobber(self, reg: str):
        # written by a non-producer; stop linking later reads to the old def
        self.last_writer.pop(reg, None)


def _producer(em, rng, kind, reg, const):
    if kind == "mov_const":
        em.emit(f"mov {reg}, 0x{const:x}", defines=reg)
    elif kind == "mov_load":
        em.emit(f"mov {reg}, qword [rbp-0x{const:x}]", defines=reg)
    elif kind == "mov_global":
        em.emit(f"mov {reg}, 0x{0x400000 + const * 0x40:x}", defines=reg)
    else:
        em.emit(f"lea {reg}, [rbp-0x{const:x}]", defines=reg)


def _gen_block(em, rng, kind, regs, consts, targets, bid):
    em.begin_block(bid)
    r0, r1, r2 = regs
    # each block leans on two of the function's constants, so in-block
    # instruction pairs usually share a literal token
    block_consts = [int(consts[k]) for k in rng.permutation(len(consts))[:2]]
    c = lambda: block_consts[int(rng.integers(2))]
    jt = lambda: int(targets[rng.integers(len(targets))])
    if kind == "load_arith":
        _producer(em, rng, PRODUCERS[rng.integers(len(PRODUCERS))], r0, c())
        _producer(em, rng, PRODUCERS[rng.integers(len(PRODUCERS))], r1, c())
        for _ in range(int(rng.integers(2, 4))):
            op = ARITH[rng.integers(len(ARITH))]
            if rng.random() < 0.4:
                dst = (r1, r2)[int(rng.integers(2))]
                em.emit(f"{op} {dst}, 0x{c():x}", uses=[dst])
            else:
                dst, src = (r2, r0) if rng.random() < 0.5 else (r1, r0)
                em.emit(f"{op} {dst}, {src}", uses=[src, dst])
            em.clobber(dst)
        if rng.random() < 0.5:
            em.emit(f"imul {r2}, {r1}, 0x{c():x}", uses=[r1])
            em.clobber(r2)
        em.emit(f"mov qword [rbp-0x{c():x}], {r2}", uses=[r2])
    elif kind == "compare_branch":
        _producer(em, rng, "mov_load", r0, c())
        em.emit(f"mov {r1}, 0x{c():x}", defines=r1)
        roll = rng.random()
        if roll < 0.4:
            em.emit(f"cmp {r0}, {r1}", uses=[r0, r1])
        elif roll < 0.7:
            em.emit(f"cmp {r0}, 0x{c():x}", uses=[r0])
        else:
            em.emit(f"test {r0}, {r0}", uses=[r0])
        jcc = JUMPS[rng.integers(1, len(JUMPS))]
        em.emit(f"{jcc} 0x{jt():x}")
        if rng.random() < 0.5:
            em.emit(f"mov dword [rbp-0x{c():x}], 0x{c():x}")
    elif kind == "call_frame":
        em.emit(f"push {r0}", uses=[r0])
        _producer(em, rng, "mov_const", r1, c())
        em.emit(f"call {CALL_TARGETS[em.call_target]}",
                defines="rax")  # return value; links call -> mov below
        em.emit(f"mov {r2}, rax", defines=r2, uses=["rax"])
        em.emit(f"pop {r0}")
        em.clobber(r0)
        if rng.random() < 0.3:
            em.emit("leave")
        em.emit("retn" if rng.random() < 0.5 else "ret")
    else:  # unary_shift
        _producer(em, rng, "mov_load", r0, c())
        em.emit(f"{UNARY[rng.integers(len(UNARY))]} {r0}")
        em.clobber(r0)
        em.emit(f"{SHIFT[rng.integers(len(SHIFT))]} {r1}, 0x{int(rng.integers(1, 8)):x}")
        em.clobber(r1)
        if rng.random() < 0.5:
            em.emit(f"push qword [rbp-0x{c():x}]")
        em.emit(f"jmp 0x{jt():x}")


def _variant_rewrite(blocks, edges, regs, next_addr, rng):
    """O2 rendition: rotate theme registers, drop or swap one middle
    instruction per block, renumber addresses."""
    rot = {regs[i]: regs[(i + 1) % 3] for i in range(3)}

    def rename(text):
        out = []
        for tok in text.split(" "):
            bare = tok.rstrip(",")
            if bare in rot:
                out.append(tok.replace(bare, rot[bare]))
            else:
                out.append(tok)
        return " ".join(out)

    addr_map = {}
    new_blocks = []
    addr = next_addr
    for block in blocks:
        insns = [dict(i) for i in block["instructions"]]
        if len(insns) >= 4:
            k = 1 + int(rng.integers(len(insns) - 2))
            if rng.random() < 0.5:
                dropped = insns.pop(k)
                addr_map[dropped["addr"]] = None
            else:
                insns[k], insns[k - 1] = insns[k - 1], insns[k]
        rewritten = []
        for insn in insns:
            addr_map.setdefault(insn["addr"], addr)
            rewritten.append({"addr": addr, "text": rename(insn["text"])})
            addr += 4
        new_blocks.append({"id": block["id"], "instructions": rewritten,
                           "succs": list(block["succs"])})
    new_edges = []
    for e in edges:
        d, u = addr_map.get(e["def"]), addr_map.get(e["use"])
        if d is not None and u is not None:
            new_edges.append({"def": d, "use": u})
    return new_blocks, new_edges, addr


def build_demo_corpus(seed: int = 0, n_functions: int = 12):
    """Returns (corpus_jsonl, classes_jsonl) as strings."""
    rng = np.random.default_rng(seed)
    corpus_lines, class_lines = [], []
    addr_o1, addr_o2 = 0x401000, 0x501000
    for f in range(n_functions):
        name = f"fn_{f:03d}"
        regs = REG_THEMES[f % len(REG_THEMES)]
        # constant ranges are shared by groups of four functions, so a
        # held-out function's constants still occur in the training vocab
        consts = [0x40 * ((f // 4) % 4) + 8 + 4 * k for k in range(6)]
        # short jump targets stay literal after normalization (under five
        # hex digits), unlike code addresses; shared by pairs of functions
        targets = [0x1000 + 0x20 * ((f // 2) % 8) + 4 * k for k in range(8)]
        em = _Emitter(addr_o1, call_target=f % len(CALL_TARGETS))
        n_blocks = 2 + int(rng.integers(3))
        # sampled without replacement: a function's blocks differ in kind
        kinds = [BLOCK_KINDS[k] for k in rng.permutation(len(BLOCK_KINDS))[:n_blocks]]
        for b, kind in enumerate(kinds):
            _gen_block(em, rng, kind, regs, consts, targets, f"{name}.b{b}")
        for b in range(n_blocks - 1):
            em.blocks[b]["succs"] = [f"{name}.b{b + 1}"]
        addr_o1 = em.addr
        corpus_lines.append(json.dumps({
            "binary_id": "demo-O1", "function": name,
            "blocks": em.blocks, "def_use": em.edges}))

        v_blocks, v_edges, addr_o2 = _variant_rewrite(
            em.blocks, em.edges, regs, addr_o2, rng)
        corpus_lines.append(json.dumps({
            "binary_id": "demo-O2", "function": name,
            "blocks": v_blocks, "def_use": v_edges}))

        for b in range(n_blocks):
            bid = f"{name}.b{b}"
            class_lines.append(json.dumps({
                "class": bid,
                "blocks": [["demo-O1", bid], ["demo-O2", bid]]}))
    return "\n".join(corpus_lines) + "\n", "\n".join(class_lines) + "\n"


def write_demo_corpus(corpus_path, classes_path, seed: int = 0,
                      n_functions: int = 12) -> None:
    corpus_text, classes_text = build_demo_corpus(seed, n_functions)
    with open(corpus_path, "w", encoding="utf-8") as fh:
        fh.write(corpus_text)
    with open(classes_path, "w", encoding="utf-8") as fh:
        fh.write(classes_text)
