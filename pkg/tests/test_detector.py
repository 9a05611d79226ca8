import logging
import struct
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from mailscan.acfgmatch import SimilarityScore
from mailscan.asmfront import normalize, parse_listing
from mailscan.detector import (
    MAGIC, CalibrationInfeasible, Combinator, CorruptDb, EmptyCorpus, EngineScores,
    IncompatibleDbVersion, Label, TemplateDb, TrainingConfig, Verdict, analyze_program,
    analyze_text, calibrate_threshold, classify, classify_analysis, decide, dump_db, family_of,
    load_db, loads_db, save_db, score_analysis, train,
)
from mailscan.mutator import ObfuscationKind, mutate
from mailscan.swod import PatternWeights


def scores(acfg_value, swod_agree=0, name="famA"):
    num = round(acfg_value * 20)
    return EngineScores(((name, SimilarityScore(num, 20)),), ((name, swod_agree),))


def tiny_db(**kw):
    return TemplateDb((), (), PatternWeights.zeros(), **kw)


# --- training ------------------------------------------------------------------------

def test_single_malware_uses_defaults_with_warning(analyses, caplog):
    mal, ben = analyses
    with caplog.at_level(logging.WARNING, logger="mailscan"):
        db = train(mal[:1], ben[:4])
    assert (db.acfg_threshold, db.swod_k, db.index_len) == (0.70, 11, 16)
    assert "calibration skipped" in caplog.text


def test_empty_corpus(analyses):
    mal, ben = analyses
    with pytest.raises(EmptyCorpus):
        train([], ben)
    with pytest.raises(EmptyCorpus):
        train(mal, [])


def test_templates_cover_all_training_malware(db, analyses):
    mal, _ = analyses
    assert len(db.acfg_templates) == len(mal) == 30
    assert len(db.swod_templates) == 30
    assert db.families == sorted(a.family for a in mal)


def test_duplicate_families_get_suffixes(analyses):
    mal, ben = analyses
    twice = [replace(a, family="dup") for a in mal[:3]]
    db = train(twice, ben, TrainingConfig(calibrate=False))
    assert [n for n, _ in db.acfg_templates] == ["dup", "dup#2", "dup#3"]
    assert {family_of(n) for n, _ in db.acfg_templates} == {"dup"}


def test_sweep_picks_point_seven():
    scored = [(scores(0.70), True), (scores(0.85), True), (scores(0.65), False), (scores(0.2), False)]
    t, _ = calibrate_threshold(scored, tiny_db())
    assert t == 0.70


def test_sweep_picks_constructed_point_six():
    scored = [(scores(0.60), True), (scores(0.95), True), (scores(0.75), True),
              (scores(0.55), False), (scores(0.10), False)]
    t, _ = calibrate_threshold(scored, tiny_db())
    assert t == 0.60


def test_sweep_breaks_ties_toward_strict_setting():
    # Every threshold detects everything with no false positives: take the highest.
    scored = [(scores(1.0, 16), True), (scores(0.0, 0), False)]
    assert calibrate_threshold(scored, tiny_db()) == (0.95, 16)


def test_swod_k_sweep():
    scored = [(scores(0, 12), True), (scores(0, 13), True), (scores(0, 11), False)]
    _, k = calibrate_threshold(scored, tiny_db())
    assert k == 12


def test_calibration_needs_both_labels():
    with pytest.raises(CalibrationInfeasible):
        calibrate_threshold([(scores(0.7), True)], tiny_db())


def test_db_invariants():
    with pytest.raises(ValueError):
        tiny_db(acfg_threshold=0.0)
    with pytest.raises(ValueError):
        tiny_db(swod_k=17)


# --- classification ------------------------------------------------------------------

def test_training_sample_detects_itself(db, analyses):
    mal, _ = analyses
    for a in mal:
        v = classify_analysis(a, db)
        assert v.label is Label.MALWARE
        assert v.acfg_score.value == 1.0
        assert v.matched_family == a.family


def test_nop_variant_detected(db, analyses):
    a = analyses[0][3]
    v = mutate(a.asm, ObfuscationKind.NOP_INSERT, seed=11, intensity=0.5)
    verdict = classify_analysis(analyze_program(v, a.family), db)
    assert verdict.label is Label.MALWARE
    assert verdict.matched_family == a.family
    assert verdict.acfg_score.value == 1.0


def test_straight_line_benign(db):
    text = "".join(f"{4 * i:x}: MOV EAX, {i}\n" for i in range(12)) + "30: RET\n"
    v = classify_analysis(analyze_text(text, "x86", "flat"), db)
    assert v.label is Label.BENIGN and v.matched_family is None


def test_benign_corpus_clean(db, analyses):
    _, ben = analyses
    assert all(classify_analysis(a, db).label is Label.BENIGN for a in ben)


def test_classify_reports_stage_timings(db, corpus):
    v = classify(corpus[1][0], db)
    for stage in ("parse", "normalize", "translate", "build_acfgs", "merge_blocks",
                  "match_acfg", "match_swod", "total"):
        assert v.timings[stage] >= 0
    assert v.timings["total"] > 0


def test_verdict_requires_family_for_malware():
    with pytest.raises(ValueError):
        Verdict(Label.MALWARE, None, None, None)


def test_family_tie_break_is_lexicographic():
    s = EngineScores((("zeta", SimilarityScore(1, 1)), ("alpha", SimilarityScore(1, 1))), ())
    assert decide(s, tiny_db()).matched_family == "alpha"


def test_incompatible_version_at_classify(db, analyses):
    with pytest.raises(IncompatibleDbVersion):
        classify_analysis(analyses[0][0], replace(db, format_version=99))


@pytest.mark.parametrize("a,s", [(False, False), (False, True), (True, False), (True, True)])
def test_combinator_truth_table(a, s):
    assert Combinator.EITHER.decide(a, s) == (a or s)
    assert Combinator.BOTH.decide(a, s) == (a and s)
    assert Combinator.ACFG_ONLY.decide(a, s) == a
    assert Combinator.SWOD_ONLY.decide(a, s) == s


@pytest.fixture(scope="module")
def mixed_scores(db, analyses):
    # Programs on both sides of the threshold: originals, heavy rewrites and benign.
    mal, ben = analyses
    items = list(mal[:10]) + list(ben)
    for a in mal[:10]:
        v = mutate(a.asm, ObfuscationKind.GOTO_HEAVY, seed=1, intensity=0.6)
        items.append(analyze_program(v, a.family))
    return [score_analysis(a, db)[0] for a in items]


def test_combinator_algebra(db, mixed_scores):
    def detected(comb):
        d = replace(db, combinator=comb)
        return {i for i, s in enumerate(mixed_scores) if decide(s, d).label is Label.MALWARE}

    either, both = detected(Combinator.EITHER), detected(Combinator.BOTH)
    acfg, swod = detected(Combinator.ACFG_ONLY), detected(Combinator.SWOD_ONLY)
    assert either == acfg | swod
    assert either >= acfg
    assert both <= acfg
    assert both == acfg & swod


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_threshold_monotonicity(mixed_scores, db, t1, t2):
    lo, hi = sorted((t1, t2))
    d = replace(db, combinator=Combinator.ACFG_ONLY)

    def hits(t):
        return {i for i, s in enumerate(mixed_scores) if decide(s, d, threshold=t).label is Label.MALWARE}

    assert hits(hi) <= hits(lo)


# --- persistence ---------------------------------------------------------------------

def test_round_trip(db, tmp_path):
    path = tmp_path / "t.db"
    save_db(db, path)
    assert path.read_bytes()[:8] == MAGIC
    again = load_db(path)
    assert again == db
    assert dump_db(again) == dump_db(db)


def test_truncated_file_is_corrupt(db):
    data = dump_db(db)
    for cut in (4, 12, 40, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptDb):
            loads_db(data[:cut])


def test_flipped_byte_is_corrupt(db):
    data = bytearray(dump_db(db))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CorruptDb):
        loads_db(bytes(data))


def test_bad_magic_is_corrupt(db):
    with pytest.raises(CorruptDb):
        loads_db(b"NOTADB01" + dump_db(db)[8:])


def test_other_version_rejected(db):
    data = bytearray(dump_db(db))
    struct.pack_into("<I", data, 8, 2)
    with pytest.raises(IncompatibleDbVersion):
        loads_db(bytes(data))


def test_replay_after_reload(db, analyses, tmp_path):
    mal, ben = analyses
    path = tmp_path / "r.db"
    save_db(db, path)
    again = load_db(path)
    for a in list(mal) + list(ben):
        assert classify_analysis(a, again).to_json(False) == classify_analysis(a, db).to_json(False)


def test_pipeline_is_deterministic(db, corpus):
    path = corpus[1][5]
    a, b = classify(path, db), classify(path, db)
    assert a == b
    assert a.to_json(False) == b.to_json(False)


def test_analyze_text_matches_file(corpus):
    path = corpus[1][0]
    text = path.read_text()
    a = analyze_text(text, None, str(path))
    assert a.asm.instructions == normalize(parse_listing(text, "x86")).instructions
