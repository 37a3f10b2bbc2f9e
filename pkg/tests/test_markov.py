import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from opmark.asm_model import OpcodeVocabulary, layout, parse_disassembly, program_from_lists
from opmark.markov import (
    FeatureVector, MarkovMatrix, TransitionCounts, build, build_cfg_sensitive, build_linear, build_vocabulary,
    cfg_augmentations, count_bigrams, flatten, join_schema, normalize, split_schema,
)

from oracles import bigram_tally, tally_probabilities

ISTRUE = """
main:
    cmp bx, cx
    jeq istrue
    mov cx, ax
istrue:
    xor eax, eax
    ret
"""


def vocab(*tokens):
    return OpcodeVocabulary.from_mnemonics(tokens)


def test_count_examples(caplog):
    v = vocab("mov", "jz")
    c = count_bigrams(["mov", "mov", "jz"], v)
    assert c.counts[v.lookup("mov"), v.lookup("mov")] == 1
    assert c.counts[v.lookup("mov"), v.lookup("jz")] == 1
    assert c.counts.sum() == 2
    with caplog.at_level(logging.WARNING):
        single = count_bigrams(["a"], vocab("a"))
    assert single.short_trace and single.counts.sum() == 0
    v3 = vocab("cmp", "jeq", "mov")
    c3 = count_bigrams(["cmp", "jeq", "mov"], v3)
    assert {(v3.tokens[i], v3.tokens[j]) for i, j in zip(*np.nonzero(c3.counts))} == {("cmp", "jeq"), ("jeq", "mov")}


def test_normalize_examples():
    v = vocab("mov", "jz")
    m = normalize(count_bigrams(["mov", "mov", "jz"], v))
    assert m["mov", "mov"] == 0.5 and m["mov", "jz"] == 0.5
    assert not m.probs[v.lookup("jz")].any()
    v2 = vocab("a", "b", "c")
    counts = np.zeros((4, 4))
    counts[1, 2], counts[1, 3] = 3, 1
    m2 = normalize(TransitionCounts(v2, counts))
    assert m2["a", "b"] == 0.75 and m2["a", "c"] == 0.25


def test_unknown_mnemonics_fold_into_unk():
    v = vocab("mov")
    m = build_linear(program_from_lists({"f": ["mov eax, 1", "cpuid", "mov eax, 2"]}), v)
    assert m["mov", "<unk>"] == 1.0 and m["<unk>", "mov"] == 1.0


def test_build_linear_examples():
    p = program_from_lists({"f": ["cmp bx, cx", "jeq x", "mov cx, ax"]})
    v = vocab("cmp", "jeq", "mov")
    m = build_linear(p, v)
    assert m["cmp", "jeq"] == 1 and m["jeq", "mov"] == 1
    again = build_linear(program_from_lists({"f": ["cmp bx, cx", "jeq x", "mov cx, ax"]}), v)
    assert np.array_equal(m.probs, again.probs)


def test_cfg_three_line_example():
    p = parse_disassembly(ISTRUE)
    v = build_vocabulary([p])
    lin = build_linear(p, v)
    cfg = build_cfg_sensitive(p, v)
    for a, b in (("jeq", "xor"), ("cmp", "xor")):
        assert cfg[a, b] > 0
        assert lin[a, b] == 0
    assert cfg.mode == "cfg" and lin.mode == "linear"


def test_cfg_return_edge_for_called_function():
    p = parse_disassembly("main:\n  push rbp\n  call helper\n  pop rbp\n  ret\nhelper:\n  xor eax, eax\n  ret\n")
    aug = cfg_augmentations(p)
    assert len(aug) == 1
    # call -> xor, push -> xor, helper's ret -> pop
    assert set(aug[0].edges) == {(1, 4), (0, 4), (5, 2)}


def test_cfg_local_target_gets_single_edge():
    p = parse_disassembly("f:\n  mov ecx, 3\n.top:\n  dec ecx\n  jnz .top\n  ret\n")
    (a,) = cfg_augmentations(p)
    assert a.edges == ((2, 1),)


def test_unresolvable_call_adds_nothing():
    p = program_from_lists({"f": ["mov edi, eax", "call printf", "ret"]})
    v = build_vocabulary([p])
    assert cfg_augmentations(p) == []
    assert np.array_equal(build_cfg_sensitive(p, v).probs, build_linear(p, v).probs)


def test_cfg_without_fallthrough():
    p = parse_disassembly(ISTRUE)
    v = build_vocabulary([p])
    m = build_cfg_sensitive(p, v, keep_fallthrough=False)
    assert m["jeq", "mov"] == 0 and m["jeq", "xor"] == 1


@given(st.lists(st.sampled_from(["mov eax, 1", "add eax, ebx", "nop", "push rcx", "pop rcx", "xor eax, eax"]),
                min_size=1, max_size=30))
def test_no_control_flow_modes_identical(lines):
    p = program_from_lists({"f": lines})
    v = build_vocabulary([p])
    assert np.array_equal(build_cfg_sensitive(p, v).probs, build_linear(p, v).probs)


def test_flatten_examples():
    v = vocab("a")
    m = MarkovMatrix(v, np.array([[0.0, 1.0], [0.5, 0.5]]))
    assert flatten(m).values.tolist() == [0, 1, 0.5, 0.5]
    assert not flatten(MarkovMatrix(v, np.zeros((2, 2)))).values.any()
    p = program_from_lists({"f": ["cmp bx, cx", "jeq x", "mov cx, ax"]})
    vec = flatten(build_linear(p, OpcodeVocabulary(("<unk>", "cmp", "jeq"))))
    # three tokens: mov folds into UNK, so cmp->jeq and jeq->UNK are the only ones
    assert len(vec) == 9 and sorted(vec.values.tolist())[-2:] == [1.0, 1.0] and vec.values.sum() == 2


def test_build_vocabulary_frequency_and_ties():
    p = program_from_lists({"f": ["mov eax, 1"] * 10 + ["jz x"] * 3 + ["add eax, 1"] * 3})
    assert build_vocabulary([p], cap=3).tokens == ("<unk>", "mov", "add")
    assert set(build_vocabulary([p], cap=10).tokens) == {"<unk>", "mov", "add", "jz"}
    q = program_from_lists({"g": ["ret", "nop"]})
    assert build_vocabulary([p, q]).tokens == build_vocabulary([q, p]).tokens


def test_schema_helpers():
    assert split_schema("MM+GF:cfg") == (["MM", "GF"], "cfg")
    assert split_schema("MM,linear") == (["MM"], "linear")
    assert join_schema("MM:cfg", "GF:cfg") == "MM+GF:cfg"
    with pytest.raises(ValueError):
        split_schema("XYZ:cfg")
    with pytest.raises(ValueError):
        FeatureVector("MM:linear", np.array([np.nan]))


def test_matrix_save_load(tmp_path):
    p = parse_disassembly(ISTRUE)
    m = build(p, build_vocabulary([p]), "cfg")
    m.save(tmp_path / "m.omk")
    back = MarkovMatrix.load(tmp_path / "m.omk")
    assert back.vocabulary == m.vocabulary and back.mode == "cfg"
    assert np.array_equal(back.probs, m.probs)
    assert "jeq" in m.to_json()


@given(st.lists(st.sampled_from("abc"), max_size=12))
def test_normalize_matches_exact_tally(trace):
    v = vocab("a", "b", "c")
    m = normalize(count_bigrams(trace, v))
    expected = tally_probabilities(trace)
    for i, x in enumerate(v.tokens):
        for j, y in enumerate(v.tokens):
            assert Fraction(m.probs[i, j]) == Fraction(float(expected.get((x, y), 0)))
    counts = count_bigrams(trace, v).counts
    assert {(v.tokens[i], v.tokens[j]): int(counts[i, j]) for i, j in zip(*np.nonzero(counts))} == bigram_tally(trace)
