import random

from hypothesis import given, settings, strategies as st

from mailscan.acfg import Acfg, build_acfgs, dump_acfg, merge_all, merge_blocks
from mailscan.asmfront import normalize, parse_listing
from mailscan.mail import MailPattern as P, translate
from mailscan.synth import generate_program
from oracles import make_acfg


def graphs(text, arch="x86", merge=True):
    sig = build_acfgs(translate(normalize(parse_listing(text, arch))))
    return merge_all(sig) if merge else sig


def test_straight_line_single_block():
    text = "".join(f"{4 * i:x}: MOV EAX, {i}\n" for i in range(5))
    sig = graphs(text, merge=False)
    assert len(sig.acfgs) == 1
    g = sig.acfgs[0]
    assert len(g) == 1 and not g.edges
    assert len(g.blocks[0].statements) == 5


DIAMOND = """\
0: CMP EAX, 0
4: JE 0x14
8: MOV EBX, 1
c: ADD EBX, 2
10: JMP 0x18
14: MOV EBX, 3
18: RET
"""


def test_if_else_is_a_diamond():
    g = graphs(DIAMOND, merge=False).acfgs[0]
    assert len(g) == 4
    assert len(g.edges) == 4
    assert merge_blocks(g) == g


def test_unconditional_jump_is_threaded_onto_its_edge():
    g = graphs(DIAMOND, merge=False).acfgs[0]
    then_arm = g.blocks[1]
    assert P.JUMP_CONSTANT not in then_arm.pattern_seq
    assert (1, 3) in g.edges


def test_benign_shape_from_crafted_listing():
    # Entry test, two-way branch, a loop arm and a shared exit: blocks 0-3 plus extra arms.
    text = """\
0: CMP EAX, 0
4: JLE 0x20
8: MOV ECX, 4
c: ADD EBX, ECX
10: DEC ECX
14: JNE 0xc
18: MOV EAX, EBX
1c: JMP 0x28
20: CALL strlen
24: MOV EAX, 0
28: RET
"""
    g = graphs(text).acfgs[0]
    # Leaders by hand: 0, 8, c (loop head), 18, 20, 28.  Block 8 cannot fuse with the
    # loop body because c has two predecessors.  DEC has no immediate operand.
    seqs = [b.pattern_seq for b in g.blocks]
    assert seqs == [
        (P.TEST_CONSTANT, P.CONTROL_CONSTANT),
        (P.ASSIGN_CONSTANT,),
        (P.ASSIGN, P.ASSIGN, P.CONTROL_CONSTANT),
        (P.ASSIGN,),
        (P.LIBCALL, P.ASSIGN_CONSTANT),
        (P.JUMP_STACK,),
    ]
    assert g.edges == {(0, 1), (0, 4), (1, 2), (2, 2), (2, 3), (3, 5), (4, 5)}


def test_unknown_target_branch_adds_no_edge():
    text = "0: MOV EAX, 1\n4: JMP EAX\n8: MOV EBX, 2\nc: RET\n"
    sig = graphs(text, merge=False)
    first = sig.acfgs[0]
    assert not first.edges
    # The statements after the register jump are only reachable through it.
    assert len(sig.acfgs) == 2


def test_call_does_not_end_block():
    g = graphs("0: MOV EAX, 1\n4: CALL 0x100\n8: ADD EAX, 1\nc: RET\n").acfgs[0]
    assert len(g) == 1


def test_one_acfg_per_labelled_function():
    text = "main:\n0: CALL helper\n4: RET\nhelper:\n8: MOV EAX, 1\nc: RET\n"
    sig = graphs(text)
    assert [g.function_label for g in sig.acfgs] == ["main", "helper"]


def test_linear_chain_merges_to_one_block():
    g = make_acfg([(P.ASSIGN,), (P.TEST,), (P.ASSIGN_CONSTANT,)], [(0, 1), (1, 2)])
    m = merge_blocks(g)
    assert len(m) == 1 and not m.edges
    assert m.blocks[0].pattern_seq == (P.ASSIGN, P.TEST, P.ASSIGN_CONSTANT)


def test_dump_format():
    g = make_acfg([(P.ASSIGN, P.CONTROL_CONSTANT), (P.JUMP_STACK,)], [(0, 1)])
    assert dump_acfg(g).splitlines() == [
        "BLOCK 0: ASSIGN,CONTROL_CONSTANT", "BLOCK 1: JUMP_STACK", "EDGE 0 1"]


# --- trace preservation over random graphs --------------------------------------------

def traces(g: Acfg):
    """Multiset of maximal pattern paths from entry, each cut where it would revisit a block."""
    out = []

    def walk(b, path, seen):
        seq = path + list(g.blocks[b].pattern_seq)
        succ = g.succ[b]
        if not succ:
            out.append(tuple(seq))
        for t in succ:
            if t in seen:
                out.append(tuple(seq))
            else:
                walk(t, seq, seen | {t})

    walk(g.entry, [], {g.entry})
    return sorted(out)


_BODY = [P.ASSIGN, P.ASSIGN_CONSTANT, P.TEST, P.STACK, P.CALL_CONSTANT, P.LIBCALL]


def random_cfg(rng: random.Random, n: int) -> Acfg:
    edges = set()
    for b in range(1, n):
        edges.add((rng.randrange(b), b))
    for _ in range(rng.randint(0, n)):
        edges.add((rng.randrange(n), rng.randrange(n)))
    outdeg = {b: sum(1 for a, _ in edges if a == b) for b in range(n)}
    seqs = []
    for b in range(n):
        body = [rng.choice(_BODY) for _ in range(rng.randint(0, 3))]
        if outdeg[b] >= 2:
            body.append(P.CONTROL_CONSTANT)
        elif not body:
            body.append(rng.choice(_BODY))
        seqs.append(tuple(body))
    return make_acfg(seqs, edges)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 10))
def test_merge_preserves_traces_and_is_idempotent(seed, n):
    g = random_cfg(random.Random(seed), n)
    m = merge_blocks(g)
    assert traces(m) == traces(g)
    assert merge_blocks(m) == m
    assert len(m) <= len(g)
    assert m.reachable() == set(range(len(m)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 5000), st.sampled_from(["x86", "arm"]))
def test_built_graph_invariants(seed, arch):
    sig = graphs(generate_program(seed, arch), arch)
    assert sig.acfgs
    for g in sig.acfgs:
        assert g.reachable() == set(range(len(g)))
        for b in g.blocks:
            assert b.statements
            assert len(b.pattern_seq) == len(b.statements)
            assert all(not s.ends_block() for s in b.statements[:-1])
