import pytest

from asmlm.corpus import loads_corpus
from asmlm.demo import build_demo_corpus
from asmlm.evalkit import load_block_search_task
from asmlm.tokenizer import build_vocab, tokenize


def test_bundled_corpus_loads_and_validates(demo_corpus):
    assert demo_corpus.num_functions == 64  # 32 source functions, 2 builds
    assert demo_corpus.num_instructions > 500
    assert demo_corpus.num_def_use_edges > 100
    binaries = {fn.binary_id for fn in demo_corpus.functions}
    assert binaries == {"demo-O1", "demo-O2"}


def test_bundled_corpus_tokenizes(demo_corpus):
    for insn in demo_corpus.all_instructions():
        tokenize(insn.text)  # raises on any unparsable instruction
    vocab = build_vocab(demo_corpus, min_count=1)
    assert vocab.size > 50


def test_bundled_classes_resolve(demo_corpus, demo_classes_path):
    task = load_block_search_task(demo_corpus, demo_classes_path)
    assert len(task.pool) == len(task.queries)  # every class has 2 members
    classes = set(task.class_of.values())
    assert all(len([k for k, c in task.class_of.items() if c == cls]) == 2
               for cls in classes)


def test_build_is_deterministic():
    a = build_demo_corpus(seed=0, n_functions=4)
    b = build_demo_corpus(seed=0, n_functions=4)
    assert a == b
    c = build_demo_corpus(seed=1, n_functions=4)
    assert a != c


def test_generated_corpus_is_valid():
    corpus_text, _ = build_demo_corpus(seed=5, n_functions=6)
    corpus = loads_corpus(corpus_text)
    assert corpus.num_functions == 12
    for fn in corpus.functions:
        assert fn.def_use  # every function carries def-use supervision


def test_bundled_files_match_generator(demo_corpus_path, demo_classes_path):
    corpus_text, classes_text = build_demo_corpus(seed=0, n_functions=32)
    with open(demo_corpus_path, "r", encoding="utf-8") as fh:
        assert fh.read() == corpus_text
    with open(demo_classes_path, "r", encoding="utf-8") as fh:
        assert fh.read() == classes_text
