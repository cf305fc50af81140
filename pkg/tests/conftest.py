import json

import numpy as np
import pytest

from asmlm.corpus import loads_corpus
from asmlm.sampler import PairSample, TASK_CWP, TASK_DUP, apply_mlm_masking
from asmlm.tokenizer import Vocabulary, build_vocab

DATA_DIR = None


def _demo_path(name: str):
    import importlib.resources
    return importlib.resources.files("asmlm") / "data" / name


@pytest.fixture(scope="session")
def demo_corpus_path(tmp_path_factory):
    return str(_demo_path("demo_corpus.jsonl"))


@pytest.fixture(scope="session")
def demo_classes_path():
    return str(_demo_path("demo_classes.jsonl"))


@pytest.fixture(scope="session")
def demo_corpus(demo_corpus_path):
    from asmlm.corpus import load_corpus
    return load_corpus(demo_corpus_path)


def make_function(name="f", binary_id="bin", texts=("mov rax, rbx",),
                  block_id="b0", edges=(), base_addr=0x1000):
    insns = [{"addr": base_addr + 4 * i, "text": t} for i, t in enumerate(texts)]
    return {
        "binary_id": binary_id, "function": name,
        "blocks": [{"id": block_id, "instructions": insns, "succs": []}],
        "def_use": [{"def": d, "use": u} for d, u in edges],
    }


def corpus_of(*function_objs):
    return loads_corpus("\n".join(json.dumps(o) for o in function_objs))


@pytest.fixture
def tiny_corpus():
    return corpus_of(make_function(
        texts=("mov rax, rbx", "add rax, 0x8", "mov [rbp-0x8], rax"),
        edges=((0x1000, 0x1004), (0x1004, 0x1008))))


@pytest.fixture
def tiny_vocab(tiny_corpus):
    return build_vocab(tiny_corpus, min_count=1)


def make_pairs(n, vocab_size=20, task=TASK_CWP, seed=0, max_ids=6):
    """Random id-sequence pairs for batch/masking tests."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n):
        l1 = int(rng.integers(1, max_ids + 1))
        l2 = int(rng.integers(1, max_ids + 1))
        pairs.append(PairSample(
            tuple(int(x) for x in rng.integers(7, vocab_size, size=l1)),
            tuple(int(x) for x in rng.integers(7, vocab_size, size=l2)),
            task, bool(k % 2)))
    return pairs


def fake_vocab(size=20):
    """A vocabulary with `size - 7` synthetic single-letter surfaces."""
    return Vocabulary([f"t{i}" for i in range(size - 7)])


def make_batch(pairs, vocab, max_len=16, seed=0, mask_rate=0.15):
    return apply_mlm_masking(pairs, vocab, max_len, seed=seed,
                             mask_rate=mask_rate)
