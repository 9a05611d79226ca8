import logging
import random

import pytest
from hypothesis import given, settings, strategies as st

from mailscan.acfg import Acfg, Block, ProgramSignatureAcfg
from mailscan.acfgmatch import (
    EmptySignature, ProgramIndex, RejectReason, match_acfg, similarity,
)
from mailscan.mail import MailPattern as P
from oracles import brute_force_match, is_embedding, make_acfg, random_acfg, random_pair

A = (P.ASSIGN, P.TEST_CONSTANT, P.CONTROL_CONSTANT)
B = (P.ASSIGN_CONSTANT,)
C = (P.STACK, P.CALL_CONSTANT)
D = (P.ASSIGN, P.ASSIGN)
E = (P.JUMP_STACK,)
X = (P.LIBCALL, P.ASSIGN)


def embedded_pair():
    # Template a..e; the candidate carries it on blocks b, c, e, h, j among ten.
    template = make_acfg([A, B, C, D, E], [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)])
    cand_seqs = [X, A, B, X, C, X, B, D, X, E]
    #             a  b  c  d  e  f  g  h  i  j
    cand_edges = [(0, 1), (1, 2), (1, 4), (2, 7), (4, 7), (7, 9), (0, 3), (3, 5),
                  (5, 6), (6, 8), (8, 9), (2, 3)]
    return template, make_acfg(cand_seqs, cand_edges)


def test_embedded_subgraph_is_found():
    t, c = embedded_pair()
    r = match_acfg(t, c)
    assert r.matched and r.reject_reason is None
    assert r.mapping == {0: 1, 1: 2, 2: 4, 3: 7, 4: 9}
    assert is_embedding(t, c, r.mapping)


def same_shape_pair():
    left = make_acfg([A, B, C, E], [(0, 1), (0, 2), (1, 3), (2, 3)])
    right = make_acfg([A, B, D, E], [(0, 1), (0, 2), (1, 3), (2, 3)])
    return left, right


def test_isomorphic_but_patterns_differ():
    left, right = same_shape_pair()
    r = match_acfg(left, right)
    assert not r.matched
    assert r.reject_reason is RejectReason.PATTERN_MISMATCH
    assert r.mapping is None


def test_no_isomorphism_reason():
    t = make_acfg([A, A, A], [(0, 1), (1, 2), (2, 0)])
    c = make_acfg([A, A, A], [(0, 1), (1, 2)])
    assert match_acfg(t, c).reject_reason is RejectReason.NO_ISOMORPHISM


def test_size_bound():
    t = make_acfg([B] * 5, [(i, i + 1) for i in range(4)])
    r = match_acfg(t, t, size_bound=4)
    assert not r.matched and r.reject_reason is RejectReason.SIZE_BOUND
    assert match_acfg(t, t, size_bound=5).matched


def test_self_loop_must_be_preserved():
    t = make_acfg([B], [(0, 0)])
    assert not match_acfg(t, make_acfg([B], [])).matched
    assert match_acfg(t, make_acfg([B, B], [(1, 1)])).matched


def permuted(g: Acfg, rng: random.Random) -> Acfg:
    order = list(range(len(g)))
    rng.shuffle(order)
    new = {old: i for i, old in enumerate(order)}
    blocks = tuple(Block(new[old], g.blocks[old].statements) for old in order)
    return Acfg(blocks, frozenset((new[a], new[b]) for a, b in g.edges), new[g.entry])


def supergraph(g: Acfg, rng: random.Random) -> Acfg:
    extra = rng.randint(0, 3)
    seqs = [b.pattern_seq for b in g.blocks] + [rng.choice([A, B, C]) for _ in range(extra)]
    n = len(seqs)
    edges = set(g.edges) | {(rng.randrange(n), rng.randrange(n)) for _ in range(rng.randint(0, 4))}
    return make_acfg(seqs, edges, g.entry)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_reflexive(seed):
    g = random_acfg(random.Random(seed), random.Random(seed).randint(1, 12))
    r = match_acfg(g, g)
    assert r.matched
    assert is_embedding(g, g, r.mapping)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_isomorphism_invariance(seed):
    rng = random.Random(seed)
    t, c = random_pair(rng)
    assert match_acfg(t, permuted(c, rng)).matched == match_acfg(t, c).matched
    assert match_acfg(permuted(t, rng), c).matched == match_acfg(t, c).matched


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_monotone_in_candidate(seed):
    rng = random.Random(seed)
    t, c = random_pair(rng)
    if match_acfg(t, c).matched:
        assert match_acfg(t, supergraph(c, rng)).matched


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32))
def test_agrees_with_brute_force(seed):
    t, c = random_pair(random.Random(seed))
    r = match_acfg(t, c)
    assert r.matched == brute_force_match(t, c)
    if r.matched:
        assert is_embedding(t, c, r.mapping)


# --- program-level similarity ---------------------------------------------------

def sig(*gs):
    return ProgramSignatureAcfg(tuple(gs), "t")


def test_self_similarity_is_one():
    rng = random.Random(5)
    s = sig(*(random_acfg(rng, rng.randint(1, 6)) for _ in range(5)))
    assert similarity(s, s).value == 1.0


def test_seven_of_ten_templates():
    present = [make_acfg([A, B], [(0, 1)]), make_acfg([C], []), make_acfg([D, E], [(0, 1)]),
               make_acfg([A, A], [(0, 1)]), make_acfg([B, C], [(0, 1)]),
               make_acfg([E], [(0, 0)]), make_acfg([A, D, E], [(0, 1), (1, 2)])]
    absent = [make_acfg([X, X], [(0, 1)]), make_acfg([X], []), make_acfg([A, X], [(0, 1)])]
    program = sig(*present, make_acfg([B, D], [(0, 1)]))
    score = similarity(sig(*present, *absent), program)
    assert (score.matched_count, score.template_count) == (7, 10)
    assert score.value == pytest.approx(0.7)


def test_one_program_acfg_may_satisfy_several_templates():
    big = make_acfg([A, B, C], [(0, 1), (1, 2)])
    score = similarity(sig(make_acfg([A], []), make_acfg([B, C], [(0, 1)])), sig(big))
    assert score.matched_count == 2


def test_empty_signature():
    g = make_acfg([A], [])
    with pytest.raises(EmptySignature):
        similarity(sig(), sig(g))
    with pytest.raises(EmptySignature):
        similarity(sig(g), sig())


def test_oversized_templates_leave_denominator(caplog):
    small = make_acfg([A], [])
    large = make_acfg([B] * 6, [(i, i + 1) for i in range(5)])
    with caplog.at_level(logging.WARNING):
        score = similarity(sig(small, large), sig(small), size_bound=5)
    assert (score.matched_count, score.template_count, score.skipped) == (1, 1, 1)
    assert "size bound" in caplog.text


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32))
def test_similarity_matches_all_pairs_brute_force(seed):
    rng = random.Random(seed)
    tpl = [random_pair(rng, 6)[0] for _ in range(rng.randint(1, 4))]
    prog = [random_acfg(rng, rng.randint(1, 6), 0.3, rng.randint(1, 3)) for _ in range(rng.randint(1, 4))]
    expected = sum(any(brute_force_match(t, p) for p in prog) for t in tpl)
    score = similarity(sig(*tpl), sig(*prog))
    assert score.matched_count == expected
    assert 0.0 <= score.value <= 1.0
    rng.shuffle(tpl)
    rng.shuffle(prog)
    assert similarity(sig(*tpl), sig(*prog)).value == score.value


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_index_never_drops_a_host(seed):
    rng = random.Random(seed)
    prog = sig(*(random_acfg(rng, rng.randint(1, 6), 0.3, 2) for _ in range(4)))
    t = random_pair(rng, 5)[0]
    hosts = {j for j, g in enumerate(prog.acfgs) if brute_force_match(t, g)}
    assert hosts <= set(ProgramIndex(prog).candidates(t))
