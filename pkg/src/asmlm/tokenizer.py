"""Instruction tokenization, normalization and vocabulary handling.

Tokenization is fine-grained: "mov rax, qword [rsp+0x58]" becomes
[mov, rax, qword, [, rsp, +, 0x58, ]].  Commas and whitespace separate
tokens and are dropped; brackets and arithmetic signs inside memory
expressions are tokens of their own.  Numeric literals are canonicalized
to lowercase "0x" hexadecimal before normalization so the five-hex-digit
address rule is radix-independent.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from .corpus import DisasmCorpus
from .errors import EmptyCorpus, UnparsableInstruction

PAD, CLS, SEP, MASK, UNK, ADDR, STR = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[addr]", "[str]"
RESERVED = (PAD, CLS, SEP, MASK, UNK, ADDR, STR)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID, ADDR_ID, STR_ID = range(7)
NUM_RESERVED = len(RESERVED)

# Hex digits after "0x" at which a constant is considered an address.
ADDR_DIGIT_THRESHOLD = 5

_GPR64 = {"rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "rip"} | {f"r{i}" for i in range(8, 16)}
_GPR32 = {"eax", "ebx", "ecx", "edx", "esi", "edi", "ebp", "esp", "eip"} | {f"r{i}d" for i in range(8, 16)}
_GPR16 = {"ax", "bx", "cx", "dx", "si", "di", "bp", "sp"} | {f"r{i}w" for i in range(8, 16)}
_GPR8 = {"al", "bl", "cl", "dl", "ah", "bh", "ch", "dh",
         "sil", "dil", "bpl", "spl"} | {f"r{i}b" for i in range(8, 16)}
_SEGMENT = {"cs", "ds", "es", "fs", "gs", "ss"}
_VECTOR = ({f"xmm{i}" for i in range(32)} | {f"ymm{i}" for i in range(32)}
           | {f"zmm{i}" for i in range(32)} | {f"mm{i}" for i in range(8)}
           | {f"st{i}" for i in range(8)} | {"st"})
REGISTERS = frozenset(_GPR64 | _GPR32 | _GPR16 | _GPR8 | _SEGMENT | _VECTOR)

SIZE_KEYWORDS = frozenset({"byte", "word", "dword", "qword", "tbyte", "oword",
                           "xmmword", "ymmword", "zmmword", "ptr"})
PREFIXES = frozenset({"rep", "repe", "repz", "repne", "repnz", "lock", "bnd", "notrack"})

_IDENT_START = set("abcdefghijklmnopqrstuvwxyz_.@$?")
_IDENT_CONT = _IDENT_START | set("0123456789")
_HEX_DIGITS = set("0123456789abcdef")


@dataclass(frozen=True)
class Token:
    surface: str
    kind: str  # opcode | register | size-keyword | punct | number | string
    #          # | addr-placeholder | str-placeholder | symbol | special


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[Token, ...]

    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]

    def text(self) -> str:
        return " ".join(self.surfaces())


def split_operands(text: str):
    """Split an instruction into (prefixes, mnemonic, operand strings).

    Operands are separated by commas outside quotes; the mnemonic field is
    whatever precedes the first operand.
    """
    stripped = text.strip()
    if not stripped:
        raise UnparsableInstruction(text, "empty instruction")
    parts = stripped.split(None, 1)
    words, rest = [parts[0].lower()], parts[1] if len(parts) > 1 else ""
    while words[-1] in PREFIXES and rest.strip():
        parts = rest.strip().split(None, 1)
        words.append(parts[0].lower())
        rest = parts[1] if len(parts) > 1 else ""
    prefixes, mnemonic = words[:-1], words[-1]
    if not mnemonic or not all(c in _IDENT_CONT for c in mnemonic):
        raise UnparsableInstruction(text, f"bad mnemonic {mnemonic!r}")

    operands = []
    cur, quote = [], None
    for ch in rest:
        if quote:
            cur.append(ch)
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
            cur.append(ch)
        elif ch == ",":
            operands.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if quote:
        raise UnparsableInstruction(text, "unterminated string literal")
    tail = "".join(cur).strip()
    if tail or operands:
        operands.append(tail)
    if any(not op for op in operands):
        raise UnparsableInstruction(text, "empty operand")
    return prefixes, mnemonic, operands


def _canon_number(raw: str, text: str) -> str:
    try:
        value = int(raw, 16) if raw.lower().startswith("0x") else int(raw, 10)
    except ValueError:
        raise UnparsableInstruction(text, f"bad numeric literal {raw!r}") from None
    return f"0x{value:x}"


def _tokenize_operand(op: str, text: str) -> list[Token]:
    tokens: list[Token] = []
    src = op
    i, n = 0, len(src)
    depth = 0
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
        elif ch in "\"'":
            j = src.find(ch, i + 1)
            if j < 0:
                raise UnparsableInstruction(text, "unterminated string literal")
            tokens.append(Token(src[i:j + 1], "string"))
            i = j + 1
        elif ch == "[":
            depth += 1
            tokens.append(Token("[", "punct"))
            i += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise UnparsableInstruction(text, "unbalanced ']'")
            tokens.append(Token("]", "punct"))
            i += 1
        elif ch in "+-*":
            tokens.append(Token(ch, "punct"))
            i += 1
        elif ch.isdigit():
            j = i + 1
            if ch == "0" and j < n and src[j].lower() == "x":
                j += 1
                while j < n and src[j].lower() in _HEX_DIGITS:
                    j += 1
            else:
                while j < n and src[j].isdigit():
                    j += 1
            tokens.append(Token(_canon_number(src[i:j], text), "number"))
            i = j
        elif ch.lower() in _IDENT_START:
            j = i + 1
            while j < n and src[j].lower() in _IDENT_CONT:
                j += 1
            word = src[i:j].lower()
            if j < n and src[j] == ":" and word in _SEGMENT:
                tokens.append(Token(word + ":", "register"))
                j += 1
            elif word in REGISTERS:
                tokens.append(Token(word, "register"))
            elif word in SIZE_KEYWORDS:
                tokens.append(Token(word, "size-keyword"))
            else:
                tokens.append(Token(word, "symbol"))
            i = j
        else:
            raise UnparsableInstruction(text, f"unexpected character {ch!r}")
    if depth != 0:
        raise UnparsableInstruction(text, "unbalanced '['")
    return tokens


def tokenize(text: str) -> TokenSequence:
    """Tokenize one Intel-syntax instruction. Deterministic and total on
    the supported grammar; raises UnparsableInstruction outside it."""
    prefixes, mnemonic, operands = split_operands(text)
    tokens = [Token(p, "opcode") for p in prefixes]
    tokens.append(Token(mnemonic, "opcode"))
    for op in operands:
        tokens.extend(_tokenize_operand(op, text))
    return TokenSequence(tuple(tokens))


def operand_token_groups(text: str) -> list[list[Token]]:
    """Normalized token lists, one per operand (mnemonic excluded)."""
    _, _, operands = split_operands(text)
    return [[_normalize_token(t) for t in _tokenize_operand(op, text)]
            for op in operands]


def _normalize_token(tok: Token) -> Token:
    if tok.kind == "string":
        return Token(STR, "str-placeholder")
    if tok.kind == "number":
        if len(tok.surface) - 2 >= ADDR_DIGIT_THRESHOLD:
            return Token(ADDR, "addr-placeholder")
    return tok


def normalize(seq: TokenSequence) -> TokenSequence:
    """Replace string literals with [str] and large constants (at least
    five hex digits) with [addr]; idempotent."""
    return TokenSequence(tuple(_normalize_token(t) for t in seq.tokens))


def tokenize_normalized(text: str) -> TokenSequence:
    return normalize(tokenize(text))


def instruction_key(text: str) -> str:
    """Canonical lookup key: normalized token surfaces joined by spaces."""
    return tokenize_normalized(text).text()


class Vocabulary:
    """Surface -> id map with ids 0..6 reserved for the special tokens."""

    def __init__(self, surfaces_by_freq, counts=None):
        counts = counts or {}
        self._id_of: dict[str, int] = {s: i for i, s in enumerate(RESERVED)}
        self._counts: dict[str, int] = {s: 0 for s in RESERVED}
        for surface in surfaces_by_freq:
            if surface in self._id_of:
                continue
            self._id_of[surface] = len(self._id_of)
            self._counts[surface] = counts.get(surface, 0)
        self._surface_of = {i: s for s, i in self._id_of.items()}

    def __len__(self) -> int:
        return len(self._id_of)

    @property
    def size(self) -> int:
        return len(self._id_of)

    def __contains__(self, surface: str) -> bool:
        return surface in self._id_of

    def id_of(self, surface: str) -> int:
        return self._id_of.get(surface, UNK_ID)

    def surface_of(self, token_id: int) -> str:
        return self._surface_of[token_id]

    def count_of(self, surface: str) -> int:
        return self._counts.get(surface, 0)

    def save(self, path) -> None:
        entries = [{"surface": s, "id": i, "count": self._counts.get(s, 0)}
                   for s, i in sorted(self._id_of.items(), key=lambda kv: kv[1])]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": entries}, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        entries = sorted(doc["tokens"], key=lambda e: e["id"])
        for i, expect in enumerate(RESERVED):
            if entries[i]["surface"] != expect or entries[i]["id"] != i:
                raise ValueError(f"vocab file corrupt: id {i} should be {expect}")
        surfaces = [e["surface"] for e in entries[NUM_RESERVED:]]
        counts = {e["surface"]: e["count"] for e in entries}
        return cls(surfaces, counts)


def build_vocab(corpus: DisasmCorpus, min_count: int = 1) -> Vocabulary:
    """Vocabulary of all normalized tokens seen at least min_count times,
    ids by descending frequency then lexicographic order."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    total = 0
    for insn in corpus.all_instructions():
        for tok in tokenize_normalized(insn.text).tokens:
            if tok.surface in (ADDR, STR):
                continue  # reserved, always encodable
            counts[tok.surface] += 1
        total += 1
    if total == 0:
        raise EmptyCorpus("no instructions to build a vocabulary from")
    kept = [s for s, c in counts.items() if c >= min_count]
    kept.sort(key=lambda s: (-counts[s], s))
    return Vocabulary(kept, dict(counts))


def encode(seq: TokenSequence, vocab: Vocabulary) -> list[int]:
    """Token ids for a normalized sequence; unknown surfaces become [UNK]."""
    return [vocab.id_of(t.surface) for t in seq.tokens]


def decode(ids, vocab: Vocabulary) -> list[str]:
    return [vocab.surface_of(i) for i in ids]


def encode_instruction(text: str, vocab: Vocabulary) -> list[int]:
    return encode(tokenize_normalized(text), vocab)
