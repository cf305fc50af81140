"""Intrinsic evaluation: outlier detection over opcode/operand
taxonomies, basic-block similarity search with ROC/AUC, and a minimal
instruction-as-word skip-gram baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import BasicBlock, DisasmCorpus
from .errors import (DegenerateLabels, InsufficientCategories,
                     MalformedRecord, UnlistedOpcode, UnlistedPattern)
from .tokenizer import instruction_key, operand_token_groups, split_operands

# 12 opcode categories; first listing wins for duplicated mnemonics.
OPCODE_TABLE = (
    ("Data Movement",
     "mov push pop cwtl cltq cqto cqtd"),
    ("Unary Operations",
     "inc dec neg not"),
    ("Binary Operations",
     "lea leaq add sub imul xor or and"),
    ("Shift Operations",
     "sal sar shr shl"),
    ("Special Arithmetic Operations",
     "imulq mulq idivq divq"),
    ("Comparison and Test Instructions",
     "cmp test"),
    ("Conditional Set Instructions",
     "sete setz setne setnz sets setns setg setnle setge setnl setl setnge "
     "setle setng seta setnbe setae setnb setbe setna"),
    ("Jump Instructions",
     "jmp je jz jne jnz js jns jg jnle jge jnl jl jnge jle jng ja jnbe jae "
     "jnb jb jnae jbe jna"),
    ("Conditional Move Instructions",
     "cmove cmovz cmovne cmovenz cmovs cmovns cmovg cmovnle cmovge cmovnl "
     "cmovnge cmovle cmovng cmova cmovnbe cmovae cmovnb cmovb cmovnae "
     "cmovbe cmovna"),
    ("Procedure Call Instructions",
     "call leave ret retn"),
    # The source table lists "mov" again here; that clashes with Data
    # Movement, so the string-move family is spelled movs*.
    ("String Instructions",
     "cmps cmpsb cmpsl cmpsw lods lodsb lodsl lodsw movs movsb movsl movsw"),
    ("Floating Point Arithmetic",
     "fabs fadd faddp fchs fdiv fdivp fdivr fdivrp fiadd fidivr fimul fisub "
     "fisubr fmul fmulp fprem fpreml frndint fscale fsqrt fsub fsubp fsubr "
     "fsubrp fxtract"),
)

OPCODE_CATEGORY: dict[str, str] = {}
for _cat, _ops in OPCODE_TABLE:
    for _op in _ops.split():
        OPCODE_CATEGORY.setdefault(_op, _cat)

OPERAND_CATEGORIES = ("none", "addr", "ref", "reg-reg", "reg-addr",
                      "reg-cnst", "reg-ref", "ref-cnst", "ref-reg", "tri")


@dataclass(frozen=True)
class CategoryRules:
    opcode_category: dict
    operand_categories: tuple


RULES = CategoryRules(OPCODE_CATEGORY, OPERAND_CATEGORIES)


@dataclass(frozen=True)
class OutlierSet:
    members: tuple  # 5 instruction texts
    outlier_index: int
    taxonomy: str  # "opcode" or "operand"
    categories: tuple  # category label per member


def classify_opcode(text: str) -> str:
    _, mnemonic, _ = split_operands(text)
    try:
        return OPCODE_CATEGORY[mnemonic]
    except KeyError:
        raise UnlistedOpcode(mnemonic) from None


def _operand_kind(tokens) -> str:
    kinds = [t.kind for t in tokens]
    if "punct" in kinds and any(t.surface == "[" for t in tokens):
        return "ref"
    if "size-keyword" in kinds:
        return "ref"
    if len(tokens) == 1:
        tok = tokens[0]
        if tok.kind == "register" and not tok.surface.endswith(":"):
            return "reg"
        if tok.kind == "addr-placeholder" or tok.kind == "symbol":
            return "addr"
        if tok.kind == "number":
            return "cnst"
    return "other"


def classify_operands(text: str) -> str:
    """Purely syntactic operand-pattern category; UnlistedPattern for
    combinations outside the taxonomy."""
    groups = operand_token_groups(text)
    if len(groups) == 0:
        return "none"
    if len(groups) == 3:
        return "tri"
    kinds = [_operand_kind(g) for g in groups]
    if len(groups) == 1:
        if kinds[0] == "addr":
            return "addr"
        if kinds[0] == "ref":
            return "ref"
        raise UnlistedPattern(f"{text!r}: 1-operand {kinds[0]}")
    if len(groups) == 2:
        pattern = tuple(kinds)
        table = {("reg", "reg"): "reg-reg", ("reg", "addr"): "reg-addr",
                 ("reg", "cnst"): "reg-cnst", ("reg", "ref"): "reg-ref",
                 ("ref", "cnst"): "ref-cnst", ("ref", "reg"): "ref-reg"}
        if pattern in table:
            return table[pattern]
        raise UnlistedPattern(f"{text!r}: {'-'.join(kinds)}")
    raise UnlistedPattern(f"{text!r}: {len(groups)} operands")


def _classify(text: str, taxonomy: str) -> str:
    return classify_opcode(text) if taxonomy == "opcode" else classify_operands(text)


def generate_outlier_sets(corpus: DisasmCorpus, taxonomy: str, n: int,
                          seed: int) -> list[OutlierSet]:
    """n sets of 4+1 instructions: four from one category, one from
    another. Members are distinct normalized instructions."""
    if taxonomy not in ("opcode", "operand"):
        raise ValueError("taxonomy must be 'opcode' or 'operand'")
    by_cat: dict[str, dict[str, str]] = {}
    for insn in corpus.all_instructions():
        try:
            cat = _classify(insn.text, taxonomy)
        except (UnlistedOpcode, UnlistedPattern):
            continue
        by_cat.setdefault(cat, {}).setdefault(instruction_key(insn.text), insn.text)
    groups = {c: sorted(m.values()) for c, m in by_cat.items()}
    common_cats = sorted(c for c, m in groups.items() if len(m) >= 4)
    if not common_cats or len(groups) < 2:
        sizes = {c: len(m) for c, m in groups.items()}
        raise InsufficientCategories(
            f"need one category with >= 4 instructions and a second with "
            f">= 1; got {sizes}")
    rng = np.random.default_rng(seed)
    sets = []
    for _ in range(n):
        common = common_cats[rng.integers(len(common_cats))]
        others = sorted(c for c in groups if c != common)
        outlier_cat = others[rng.integers(len(others))]
        four = [groups[common][i] for i in
                rng.choice(len(groups[common]), size=4, replace=False)]
        outlier = groups[outlier_cat][rng.integers(len(groups[outlier_cat]))]
        pos = int(rng.integers(5))
        members = four[:pos] + [outlier] + four[pos:]
        cats = [common] * pos + [outlier_cat] + [common] * (4 - pos)
        sets.append(OutlierSet(tuple(members), pos, taxonomy, tuple(cats)))
    return sets


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity; zero vectors count as maximally distant."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 2.0
    return float(1.0 - (a @ b) / (na * nb))


def detect_outlier(oset: OutlierSet, embed) -> int:
    """Index of the member with the largest mean cosine distance to the
    other four; ties broken toward the lowest index."""
    vecs = [np.asarray(embed(t), dtype=float) for t in oset.members]
    mean_dist = [np.mean([cosine_distance(vecs[i], vecs[j])
                          for j in range(5) if j != i])
                 for i in range(5)]
    return int(np.argmax(mean_dist))


def outlier_accuracy(sets, embed):
    """Overall and per-outlier-category detection accuracy."""
    hits = 0
    per_cat: dict[str, list[int]] = {}
    for oset in sets:
        ok = detect_outlier(oset, embed) == oset.outlier_index
        hits += ok
        cat = oset.categories[oset.outlier_index]
        per_cat.setdefault(cat, [0, 0])
        per_cat[cat][0] += ok
        per_cat[cat][1] += 1
    acc = hits / len(sets)
    return acc, {c: h / t for c, (h, t) in sorted(per_cat.items())}


# -- basic block search ------------------------------------------------

@dataclass
class BlockSearchTask:
    queries: list  # (owner_key, BasicBlock)
    pool: list     # (owner_key, BasicBlock)
    class_of: dict  # owner_key -> equivalence class id


def load_block_search_task(corpus: DisasmCorpus, truth_path) -> BlockSearchTask:
    """Ground-truth file: JSON Lines, one equivalence class per line:
    {"class": str, "blocks": [[binary_id, block_id], ...]}."""
    blocks = {}
    for fn in corpus.functions:
        for b in fn.blocks:
            blocks[(fn.binary_id, b.id)] = b
    class_of, members = {}, {}
    with open(truth_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc}") from exc
            if "class" not in obj or "blocks" not in obj:
                raise MalformedRecord(line_no, "needs 'class' and 'blocks'")
            for ref in obj["blocks"]:
                key = (ref[0], ref[1])
                if key not in blocks:
                    raise MalformedRecord(line_no, f"unknown block {key}")
                class_of[key] = obj["class"]
                members.setdefault(obj["class"], []).append(key)
    pool = [(k, blocks[k]) for k in class_of]
    queries = [(k, blocks[k]) for k in class_of if len(members[class_of[k]]) >= 2]
    return BlockSearchTask(queries, pool, class_of)


def roc_curve(scores, labels):
    """ROC points from descending score threshold sweep; ties advance
    together so equal scores get half credit in the trapezoidal area."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos, neg = int(labels.sum()), int((1 - labels).sum())
    if pos == 0 or neg == 0:
        raise DegenerateLabels("need both positive and negative pairs")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        points.append((fp / neg, tp / pos))
        i = j
    return points


def auc_trapezoid(points) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def auc_pairwise(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative),
    half credit for ties. Brute force; the oracle for auc_trapezoid."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise DegenerateLabels("need both positive and negative pairs")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def block_search_auc(task: BlockSearchTask, embed_block):
    """Cosine-similarity scores for every (query, candidate) pair with
    candidate != query; returns (ROC points, AUC)."""
    emb = {key: np.asarray(embed_block(block), dtype=float)
           for key, block in task.pool}
    scores, labels = [], []
    for qkey, _ in task.queries:
        for ckey, _ in task.pool:
            if ckey == qkey:
                continue
            scores.append(1.0 - cosine_distance(emb[qkey], emb[ckey]))
            labels.append(int(task.class_of[qkey] == task.class_of[ckey]))
    points = roc_curve(scores, labels)
    return points, auc_trapezoid(points)


# -- skip-gram baseline ------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def train_skipgram_baseline(corpus: DisasmCorpus, dim: int = 128,
                            window: int = 2, negatives: int = 5,
                            epochs: int = 5, seed: int = 0,
                            learning_rate: float = 0.025) -> dict:
    """Skip-gram with negative sampling, each normalized instruction text
    being one word and each function one document. Returns key -> vector."""
    docs = []
    for fn in corpus.functions:
        docs.append([instruction_key(i.text) for i in fn.instructions()])
    vocab = sorted({w for d in docs for w in d})
    index = {w: i for i, w in enumerate(vocab)}
    counts = np.zeros(len(vocab))
    for d in docs:
        for w in d:
            counts[index[w]] += 1
    noise = counts ** 0.75
    noise /= noise.sum()

    rng = np.random.default_rng(seed)
    w_in = (rng.random((len(vocab), dim)) - 0.5) / dim
    w_out = np.zeros((len(vocab), dim))
    for _ in range(epochs):
        for doc in docs:
            ids = [index[w] for w in doc]
            for i, center in enumerate(ids):
                lo, hi = max(0, i - window), min(len(ids), i + window + 1)
                for j in range(lo, hi):
                    if j == i:
                        continue
                    ctx = ids[j]
                    targets = np.concatenate(
                        [[ctx], rng.choice(len(vocab), size=negatives, p=noise)])
                    labels = np.zeros(len(targets))
                    labels[0] = 1.0
                    v = w_in[center]
                    outs = w_out[targets]
                    g = (_sigmoid(outs @ v) - labels) * learning_rate
                    w_in[center] = v - g @ outs
                    w_out[targets] -= np.outer(g, v)
    return {w: w_in[index[w]].copy() for w in vocab}
