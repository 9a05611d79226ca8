"""Acceptance checks; each records one PASS/FAIL line printed in the terminal summary."""

import json
import random
import time
from dataclasses import replace

from mailscan.asmfront import INSN_RE
from mailscan.acfgmatch import RejectReason, altered_fraction, match_acfg
from mailscan.cli import main
from mailscan.detector import (
    Combinator, Label, analyze_program, analyze_text, classify, classify_analysis, load_db, save_db,
)
from mailscan.evalkit import Item, LabeledDataset, TooFewItems, nfold_split, roc_and_auc
from mailscan.mutator import NotApplicable, ObfuscationKind as K, mutate
from mailscan.swod import SwodSignature, build_swod_signature, match_swod
from mailscan.synth import generate_large
from oracles import brute_force_match, pairwise_auc, random_pair


# --- 1: matcher against exhaustive search -------------------------------------------

def test_matcher_agrees_with_brute_force(record):
    rng = random.Random(2024)
    start = time.perf_counter()
    pairs = disagree = matched = 0
    for _ in range(600):
        t, c = random_pair(rng, max_blocks=8)
        want = brute_force_match(t, c)
        got = match_acfg(t, c, size_bound=8).matched
        pairs += 1
        matched += want
        disagree += got != want
    elapsed = time.perf_counter() - start
    ok = disagree == 0 and elapsed < 60
    record(1, ok, f"{pairs} pairs ({matched} embeddable), {disagree} disagreements, {elapsed:.1f}s")
    assert disagree == 0
    assert elapsed < 60


# --- 2: hand-written listings for the subgraph and pattern-mismatch cases ----------

DIAMOND = """\
0: CMP EAX, 0x1
4: JE 0x10
8: MOV EBX, 0x2
c: JMP 0x14
10: PUSH EBX
14: ADD EAX, EBX
18: JE 0x1c
1c: MOV EAX, ECX
20: RET
"""

# The diamond above sits at 0x8..0x28 inside a larger function.
HOST = """\
0: CMP ECX, 0x5
4: JE 0x40
8: CMP EAX, 0x1
c: JE 0x18
10: MOV EBX, 0x2
14: JMP 0x1c
18: PUSH EBX
1c: ADD EAX, EBX
20: JE 0x24
24: MOV EAX, ECX
28: RET
40: PUSH ECX
44: CALL strlen
48: CMP EDX, 0x3
4c: JNE 0x58
50: MOV ESI, 0x1
54: JMP 0x24
58: INC EDI
5c: JMP 0x24
"""

# Same shape as DIAMOND; the right arm assigns instead of pushing.
DIAMOND_ASSIGN = DIAMOND.replace("10: PUSH EBX", "10: MOV EBX, ECX")


def only_acfg(text):
    (g,) = analyze_text(text, "x86").acfg.acfgs
    return g


def test_hand_written_graphs(record):
    template, host = only_acfg(DIAMOND), only_acfg(HOST)
    r = match_acfg(template, host)
    leaders = {k: host.blocks[v].leader.origin_address for k, v in (r.mapping or {}).items()}
    sub_ok = r.matched and leaders == {0: 0x8, 1: 0x10, 2: 0x18, 3: 0x1C, 4: 0x24}
    other = only_acfg(DIAMOND_ASSIGN)
    m = match_acfg(template, other)
    mis_ok = not m.matched and m.reject_reason is RejectReason.PATTERN_MISMATCH
    record(2, sub_ok and mis_ok,
           f"subgraph match={r.matched} at {sorted(hex(a) for a in leaders.values())}; "
           f"mismatch pair -> matched={m.matched}, reason={m.reject_reason and m.reject_reason.value}")
    assert len(host) > len(template)
    assert sub_ok
    assert len(template) == len(other) and template.edges == other.edges
    assert mis_ok


# --- 3 and 4: variant experiment -----------------------------------------------------

PRESERVING = (K.NOP_INSERT, K.JUNK_INSERT, K.CALL_INDIRECT, K.FUNC_INDIRECT,
              K.REGISTER_RENAME, K.BLOCK_REORDER)


def test_variant_experiment(db, analyses, record):
    mal, ben = analyses
    assert (db.acfg_threshold, db.swod_k) == (0.70, 11)
    start = time.perf_counter()
    hits = total = 0
    missed = []
    for a in mal:
        for kind in PRESERVING:
            try:
                v = mutate(a.asm, kind, seed=7, intensity=0.5)
            except NotApplicable:
                continue
            total += 1
            verdict = classify_analysis(analyze_program(v, a.family), db)
            if verdict.label is Label.MALWARE and verdict.matched_family == a.family:
                hits += 1
            else:
                missed.append(f"{a.family}/{kind.value}")
    fp = sum(classify_analysis(b, db).label is Label.MALWARE for b in ben)
    elapsed = time.perf_counter() - start
    dr, fpr = hits / total, fp / len(ben)
    distinct = len({b.acfg.shape() for b in ben})
    ok = dr >= 0.95 and fpr == 0.0 and elapsed < 300
    record(3, ok, f"DR {hits}/{total} = {dr:.2%}, FPR {fp}/{len(ben)}, missed {missed}, {elapsed:.1f}s")
    assert distinct == len(ben)
    assert dr >= 0.95
    assert fpr == 0.0
    assert elapsed < 300


def test_heavy_goto_rewrites_evade_graph_matching(db, analyses, record):
    mal, _ = analyses
    graph_only = replace(db, combinator=Combinator.ACFG_ONLY)
    caught, fractions = [], []
    for a in mal:
        v = analyze_program(mutate(a.asm, K.GOTO_HEAVY, seed=7, intensity=1.0), a.family)
        fractions.append(altered_fraction(a.acfg, v.acfg))
        if classify_analysis(v, graph_only).label is Label.MALWARE:
            caught.append(a.family)
    ok = not caught and min(fractions) > 0.5
    record(4, ok, f"ACFG detections {len(caught)}/{len(mal)}, altered fraction min {min(fractions):.2f}")
    assert min(fractions) > 0.5
    assert caught == []


# --- 5: signatures unchanged by NOPs and renaming -----------------------------------

def test_nop_and_rename_keep_signatures(db, analyses, record):
    mal, _ = analyses
    w, n = db.pattern_weights, db.index_len
    checked, broken = 0, []
    for a in mal:
        want_swod = build_swod_signature(a.mail, a.acfg, w, n)
        for kind in (K.NOP_INSERT, K.REGISTER_RENAME):
            v = analyze_program(mutate(a.asm, kind, seed=3, intensity=0.5), a.family)
            checked += 1
            if v.acfg != a.acfg or build_swod_signature(v.mail, v.acfg, w, n) != want_swod:
                broken.append(f"{a.family}/{kind.value}")
    record(5, not broken, f"{checked} variants checked, {len(broken)} differ {broken}")
    assert broken == []


# --- 6: bucket agreement threshold ----------------------------------------------------

def test_eleven_of_sixteen(record):
    rng = random.Random(11)
    outcomes = []
    for agree in (11, 10):
        a = [rng.randint(-80, 80) for _ in range(16)]
        b = list(a)
        for i in rng.sample(range(16), 16 - agree):
            b[i] += rng.randint(1, 5)
        sa, sb = SwodSignature(tuple(sorted(a)), tuple(a)), SwodSignature(tuple(sorted(b)), tuple(b))
        outcomes.append(match_swod(sa, sb, 11))
    record(6, outcomes == [True, False], f"11/16 -> {outcomes[0]}, 10/16 -> {outcomes[1]}")
    assert outcomes == [True, False]


# --- 7: evaluation laws ---------------------------------------------------------------

def test_evaluation_laws(record):
    rng = random.Random(7)
    problems = []
    for trial in range(200):
        n_mal, n_ben, n = rng.randint(0, 40), rng.randint(0, 40), rng.randint(2, 10)
        items = [Item(f"m{i}", Label.MALWARE) for i in range(n_mal)]
        items += [Item(f"b{i}", Label.BENIGN) for i in range(n_ben)]
        d = LabeledDataset(tuple(items))
        try:
            folds = nfold_split(d, n, trial)
        except TooFewItems:
            if len(d) >= n:
                problems.append(f"split {trial} refused")
            continue
        flat = [i.path for f in folds for i in f]
        if sorted(flat) != sorted(i.path for i in items) or len(folds) != n:
            problems.append(f"split {trial} not a partition")
        for label in Label:
            per = [sum(i.label is label for i in f) for f in folds]
            if max(per) - min(per) > 1:
                problems.append(f"split {trial} unbalanced")
    _, perfect = roc_and_auc([(0.9, True), (0.7, True), (0.4, False), (0.1, False)])
    _, flat_auc = roc_and_auc([(0.3, y) for y in (True, False, True, False, False)])
    worst = 0.0
    for _ in range(300):
        labels = [True, False] + [rng.random() < 0.5 for _ in range(18)]
        scores = [(round(rng.random(), 1), y) for y in labels]
        worst = max(worst, abs(roc_and_auc(scores)[1] - pairwise_auc(scores)))
    ok = not problems and abs(perfect - 1) <= 1e-9 and abs(flat_auc - 0.5) <= 1e-9 and worst <= 1e-9
    record(7, ok, f"split problems {len(problems)}, AUC perfect {perfect}, constant {flat_auc}, "
                  f"max |AUC - pairwise| {worst:.1e}")
    assert problems == []
    assert abs(perfect - 1.0) <= 1e-9 and abs(flat_auc - 0.5) <= 1e-9
    assert worst <= 1e-9


# --- 8: persistence and replay --------------------------------------------------------

def test_round_trip_and_repeatable_scan(db, corpus, tmp_path, record):
    root, _, _ = corpus
    path = tmp_path / "t.db"
    save_db(db, path)
    same_db = load_db(path) == db
    outs = []
    for k in (1, 2):
        out = tmp_path / f"scan{k}.jsonl"
        main(["scan", "--db", str(path), str(root / "malware"), str(root / "benign"),
              "--no-timings", "--out", str(out)])
        outs.append(out.read_bytes())
    rows = [json.loads(x) for x in outs[0].decode().splitlines()]
    ok = same_db and outs[0] == outs[1] and len(rows) == 50
    record(8, ok, f"db round trip equal={same_db}, two scans of {len(rows)} files byte-identical={outs[0] == outs[1]}")
    assert same_db
    assert outs[0] == outs[1]
    assert all("ms_per_stage" not in r for r in rows)


# --- 9: large listing timing ----------------------------------------------------------

def test_large_listing_speed(db, tmp_path, record):
    path = tmp_path / "large.lst"
    path.write_text(generate_large(0, 10_000))
    assert len(db.acfg_templates) == 30
    start = time.perf_counter()
    v = classify(path, db)
    elapsed = time.perf_counter() - start
    n = sum(1 for ln in path.read_text().splitlines() if INSN_RE.match(ln))
    stages = {k: t for k, t in v.timings.items() if k != "total"}
    share = {k: t / v.timings["total"] for k, t in stages.items()}
    top = sorted(share, key=share.get, reverse=True)[:3]
    heavy = share["merge_blocks"] + share["match_acfg"] + share["match_swod"]
    ok = n >= 10_000 and elapsed < 5 and set(stages) >= {"merge_blocks", "match_acfg", "match_swod"}
    record(9, ok, f"{n} instructions in {elapsed:.2f}s; top stages "
                  + ", ".join(f"{k} {share[k]:.0%}" for k in top)
                  + f"; merge+matching {heavy:.0%}")
    assert n >= 10_000
    assert elapsed < 5
    assert all(t >= 0 for t in v.timings.values())

