"""Template training, classification and the on-disk template database."""

from __future__ import annotations

import enum
import json
import logging
import math
import random
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .acfg import Acfg, Block, ProgramSignatureAcfg, build_acfgs, merge_all
from .acfgmatch import DEFAULT_SIZE_BOUND, ProgramIndex, SimilarityScore, similarity
from .asmfront import Arch, AsmProgram, normalize, parse_listing, sniff_arch, sniff_family
from .mail import MailPattern, MailProgram, MailStatement, StatementKind, translate
from .swod import (
    PatternWeights,
    SwodSignature,
    WindowConfig,
    build_swod_signature,
    compute_swod_weights,
    match_swod,
    pattern_distribution,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"MAILDB01"
DEFAULT_ACFG_THRESHOLD = 0.70
DEFAULT_SWOD_K = 11
DEFAULT_INDEX_LEN = 16
THRESHOLD_GRID = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


class EmptyCorpus(ValueError):
    pass


class CalibrationInfeasible(ValueError):
    pass


class CorruptDb(ValueError):
    pass


class IncompatibleDbVersion(ValueError):
    pass


class Combinator(str, enum.Enum):
    EITHER = "EITHER"
    BOTH = "BOTH"
    ACFG_ONLY = "ACFG_ONLY"
    SWOD_ONLY = "SWOD_ONLY"

    def decide(self, acfg_fired: bool, swod_fired: bool) -> bool:
        if self is Combinator.EITHER:
            return acfg_fired or swod_fired
        if self is Combinator.BOTH:
            return acfg_fired and swod_fired
        if self is Combinator.ACFG_ONLY:
            return acfg_fired
        return swod_fired


class Label(str, enum.Enum):
    MALWARE = "Malware"
    BENIGN = "Benign"


# --- pipeline ----------------------------------------------------------------

@dataclass(frozen=True)
class Analysis:
    """A program carried through every lifting stage, with stage timings in ms."""

    name: str
    family: str | None
    asm: AsmProgram
    mail: MailProgram
    acfg: ProgramSignatureAcfg
    timings: dict[str, float] = field(default_factory=dict, compare=False)


def _clock() -> float:
    return time.perf_counter() * 1000.0


def analyze_program(p: AsmProgram, family: str | None = None, timings: dict | None = None) -> Analysis:
    timings = {} if timings is None else timings
    t = _clock()
    norm = normalize(p)
    timings["normalize"] = _clock() - t
    t = _clock()
    m = translate(norm)
    timings["translate"] = _clock() - t
    t = _clock()
    raw = build_acfgs(m)
    timings["build_acfgs"] = _clock() - t
    t = _clock()
    sig = merge_all(raw)
    timings["merge_blocks"] = _clock() - t
    return Analysis(p.name, family, norm, m, sig, timings)


def analyze_text(text: str, arch: Arch | str | None = None, name: str = "",
                 family: str | None = None) -> Analysis:
    t = _clock()
    arch = sniff_arch(text, arch)
    p = parse_listing(text, arch, name)
    timings = {"parse": _clock() - t}
    return analyze_program(p, family if family is not None else sniff_family(text), timings)


def analyze_file(path: str | Path, arch: Arch | str | None = None, family: str | None = None) -> Analysis:
    path = Path(path)
    return analyze_text(path.read_text(encoding="utf-8"), arch, str(path), family)


# --- templates and verdicts --------------------------------------------------

@dataclass(frozen=True)
class TemplateDb:
    acfg_templates: tuple[tuple[str, ProgramSignatureAcfg], ...]
    swod_templates: tuple[tuple[str, SwodSignature], ...]
    pattern_weights: PatternWeights
    acfg_threshold: float = DEFAULT_ACFG_THRESHOLD
    swod_k: int = DEFAULT_SWOD_K
    index_len: int = DEFAULT_INDEX_LEN
    combinator: Combinator = Combinator.EITHER
    size_bound: int = DEFAULT_SIZE_BOUND
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if not 0 < self.acfg_threshold <= 1:
            raise ValueError("acfg_threshold must lie in (0, 1]")
        if not 1 <= self.swod_k <= self.index_len:
            raise ValueError("swod_k must lie in [1, index_len]")
        for engine in (self.acfg_templates, self.swod_templates):
            names = [n for n, _ in engine]
            if any(not n for n in names) or len(set(names)) != len(names):
                raise ValueError("template names must be non-empty and unique")
        for _, s in self.swod_templates:
            if len(s.index_array) != self.index_len:
                raise ValueError("swod template length differs from index_len")

    @property
    def families(self) -> list[str]:
        return sorted({family_of(n) for n, _ in self.acfg_templates})


def family_of(template_name: str) -> str:
    """Family part of a template name; repeated families carry a ``#n`` suffix."""
    return template_name.split("#", 1)[0]


@dataclass(frozen=True)
class Verdict:
    label: Label
    matched_family: str | None
    acfg_score: SimilarityScore | None
    swod_matched: bool | None
    timings: dict[str, float] = field(default_factory=dict, compare=False)
    path: str = ""

    def __post_init__(self):
        if self.label is Label.MALWARE and not self.matched_family:
            raise ValueError("a malware verdict needs a family")

    @property
    def score(self) -> float:
        return self.acfg_score.value if self.acfg_score else 0.0

    def to_json(self, with_timings: bool = True) -> dict:
        out = {
            "path": self.path,
            "label": self.label.value,
            "family": self.matched_family,
            "acfg_score": round(self.score, 6),
            "swod_matched": self.swod_matched,
        }
        if with_timings:
            out["ms_per_stage"] = {k: round(v, 3) for k, v in self.timings.items()}
        return out


@dataclass(frozen=True)
class TrainingConfig:
    calibrate: bool = True
    calibration_fraction: float = 0.25
    seed: int = 0
    index_len: int = DEFAULT_INDEX_LEN
    combinator: Combinator = Combinator.EITHER
    size_bound: int = DEFAULT_SIZE_BOUND
    window: WindowConfig = WindowConfig()


@dataclass(frozen=True)
class EngineScores:
    """Raw engine outputs for one program against every template."""

    acfg: tuple[tuple[str, SimilarityScore], ...]
    swod: tuple[tuple[str, int], ...]

    def best_acfg(self) -> tuple[str | None, SimilarityScore | None]:
        if not self.acfg:
            return None, None
        name, score = min(self.acfg, key=lambda x: (-x[1].value, x[0]))
        return name, score


def score_analysis(a: Analysis, db: TemplateDb) -> tuple[EngineScores, dict[str, float]]:
    timings: dict[str, float] = {}
    t = _clock()
    index = ProgramIndex(a.acfg)
    acfg = tuple(
        (name, similarity(tpl, a.acfg, db.size_bound, index)) for name, tpl in db.acfg_templates
    )
    timings["match_acfg"] = _clock() - t
    t = _clock()
    mine = build_swod_signature(a.mail, a.acfg, db.pattern_weights, db.index_len)
    swod = tuple(
        (name, sum(x == y for x, y in zip(mine.index_array, s.index_array)))
        for name, s in db.swod_templates
    )
    timings["match_swod"] = _clock() - t
    return EngineScores(acfg, swod), timings


def decide(scores: EngineScores, db: TemplateDb, threshold: float | None = None,
           k: int | None = None, timings: dict | None = None, path: str = "") -> Verdict:
    threshold = db.acfg_threshold if threshold is None else threshold
    k = db.swod_k if k is None else k
    best_name, best = scores.best_acfg()
    acfg_fired = best is not None and best.value >= threshold
    swod_hit = next((name for name, agree in scores.swod if agree >= k), None)
    is_mal = db.combinator.decide(acfg_fired, swod_hit is not None)
    family = None
    if is_mal:
        if acfg_fired and db.combinator is not Combinator.SWOD_ONLY:
            family = family_of(best_name)
        else:
            family = family_of(swod_hit)
    return Verdict(
        Label.MALWARE if is_mal else Label.BENIGN,
        family,
        best,
        swod_hit is not None,
        dict(timings or {}),
        path,
    )


def classify_analysis(a: Analysis, db: TemplateDb) -> Verdict:
    if db.format_version != FORMAT_VERSION:
        raise IncompatibleDbVersion(db.format_version)
    scores, timings = score_analysis(a, db)
    return decide(scores, db, timings={**a.timings, **timings}, path=a.name)


def classify(path: str | Path, db: TemplateDb, arch: Arch | str | None = None) -> Verdict:
    """Run the whole pipeline on one listing file and judge it against ``db``."""
    t = _clock()
    a = analyze_file(path, arch)
    v = classify_analysis(a, db)
    v.timings["total"] = _clock() - t
    return v


# --- training ----------------------------------------------------------------

def _template_names(samples: Sequence[Analysis]) -> list[str]:
    seen: dict[str, int] = {}
    names = []
    for a in samples:
        fam = a.family or Path(a.name).stem or "unnamed"
        seen[fam] = seen.get(fam, 0) + 1
        names.append(fam if seen[fam] == 1 else f"{fam}#{seen[fam]}")
    return names


def _build_db(malware: Sequence[Analysis], weights: PatternWeights, cfg: TrainingConfig,
              threshold: float, k: int) -> TemplateDb:
    names = _template_names(malware)
    return TemplateDb(
        acfg_templates=tuple(zip(names, (a.acfg for a in malware))),
        swod_templates=tuple(
            (n, build_swod_signature(a.mail, a.acfg, weights, cfg.index_len))
            for n, a in zip(names, malware)
        ),
        pattern_weights=weights,
        acfg_threshold=threshold,
        swod_k=k,
        index_len=cfg.index_len,
        combinator=cfg.combinator,
        size_bound=cfg.size_bound,
    )


def _pick(grid, rates) -> float:
    # Highest DR, then lowest FPR, then the strictest setting.
    return max(grid, key=lambda g: (rates[g][0], -rates[g][1], g))


def calibrate_threshold(
    scored: Sequence[tuple[EngineScores, bool]], db: TemplateDb
) -> tuple[float, int]:
    """Sweep the ACFG threshold and SWOD k over labelled calibration scores."""
    mal = [s for s, y in scored if y]
    ben = [s for s, y in scored if not y]
    if not mal or not ben:
        raise CalibrationInfeasible("calibration needs both labels")

    def rates(fires) -> tuple[float, float]:
        dr = sum(map(fires, mal)) / len(mal)
        fpr = sum(map(fires, ben)) / len(ben)
        return dr, fpr

    acfg = {
        t: rates(lambda s, t=t: s.best_acfg()[1] is not None and s.best_acfg()[1].value >= t)
        for t in THRESHOLD_GRID
    }
    ks = range(math.ceil(0.5 * db.index_len), db.index_len + 1)
    swod = {k: rates(lambda s, k=k: any(a >= k for _, a in s.swod)) for k in ks}
    return _pick(THRESHOLD_GRID, acfg), _pick(ks, swod)


def _split(items: list, fraction: float, rng: random.Random) -> tuple[list, list]:
    order = list(range(len(items)))
    rng.shuffle(order)
    cut = max(1, round(fraction * len(items)))
    held = sorted(order[:cut])
    rest = sorted(order[cut:])
    return [items[i] for i in rest], [items[i] for i in held]


def train(malware: Sequence[Analysis], benign: Sequence[Analysis],
          cfg: TrainingConfig = TrainingConfig()) -> TemplateDb:
    """Build templates from every training malware sample and pick thresholds.

    Thresholds are swept on a held-out slice scored against templates built
    from the remaining malware.  When the corpus cannot spare that slice the
    defaults 0.70 and 11 are kept and a warning is logged.
    """
    if not malware or not benign:
        raise EmptyCorpus("training needs malware and benign samples")
    weights = compute_swod_weights(
        pattern_distribution([a.mail for a in malware], cfg.window),
        pattern_distribution([a.mail for a in benign], cfg.window),
        cfg.window,
        provenance=f"{len(malware)} malware / {len(benign)} benign",
    )
    threshold, k = DEFAULT_ACFG_THRESHOLD, min(DEFAULT_SWOD_K, cfg.index_len)
    if cfg.calibrate:
        try:
            threshold, k = _calibrate(malware, benign, weights, cfg)
        except CalibrationInfeasible as exc:
            log.warning("calibration skipped (%s); using defaults %.2f and %d/%d",
                        exc, threshold, k, cfg.index_len)
    return _build_db(malware, weights, cfg, threshold, k)


def _calibrate(malware, benign, weights, cfg) -> tuple[float, int]:
    frac = cfg.calibration_fraction
    if len(malware) * frac < 1 or len(benign) * frac < 1 or len(malware) < 2:
        raise CalibrationInfeasible(
            f"{len(malware)} malware / {len(benign)} benign cannot spare a {frac:.0%} slice")
    rng = random.Random(cfg.seed)
    mal_fit, mal_cal = _split(list(malware), frac, rng)
    _, ben_cal = _split(list(benign), frac, rng)
    fit_db = _build_db(mal_fit, weights, cfg, DEFAULT_ACFG_THRESHOLD,
                       min(DEFAULT_SWOD_K, cfg.index_len))
    scored = [(score_analysis(a, fit_db)[0], True) for a in mal_cal]
    scored += [(score_analysis(a, fit_db)[0], False) for a in ben_cal]
    return calibrate_threshold(scored, fit_db)


# --- persistence -------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic "MAILDB01" | u32 version | u32 section count
#   per section: u16 name length | name | u64 payload length | u32 crc32 | payload
# Payloads are UTF-8 JSON.

def _stmt_to_json(s: MailStatement) -> list:
    return [s.index, s.origin_address, s.kind.value, s.pattern.value,
            [list(e) for e in s.operand_sketch], s.target]


def _stmt_from_json(v: list) -> MailStatement:
    index, addr, kind, pattern, sketch, target = v
    return MailStatement(index, addr, StatementKind(kind), MailPattern(pattern),
                         tuple(tuple(e) for e in sketch), target)


def _sig_to_json(sig: ProgramSignatureAcfg) -> dict:
    return {
        "provenance": sig.provenance,
        "acfgs": [
            {
                "label": g.function_label,
                "entry": g.entry,
                "blocks": [[_stmt_to_json(s) for s in b.statements] for b in g.blocks],
                "edges": sorted(list(e) for e in g.edges),
            }
            for g in sig.acfgs
        ],
    }


def _sig_from_json(v: dict) -> ProgramSignatureAcfg:
    graphs = []
    for g in v["acfgs"]:
        blocks = tuple(
            Block(i, tuple(_stmt_from_json(s) for s in b)) for i, b in enumerate(g["blocks"])
        )
        graphs.append(Acfg(blocks, frozenset(tuple(e) for e in g["edges"]), g["entry"], g["label"]))
    return ProgramSignatureAcfg(tuple(graphs), v["provenance"])


def _sections(db: TemplateDb) -> dict[str, object]:
    w = db.pattern_weights
    return {
        "meta": {
            "acfg_threshold": db.acfg_threshold,
            "swod_k": db.swod_k,
            "index_len": db.index_len,
            "combinator": db.combinator.value,
            "size_bound": db.size_bound,
        },
        "weights": {
            "weight": {p.value: v for p, v in w.weight.items()},
            "window": w.window.to_dict(),
            "provenance": w.provenance,
        },
        "acfg": [[name, _sig_to_json(sig)] for name, sig in db.acfg_templates],
        "swod": [
            [name, list(s.weights_sorted), list(s.index_array), s.provenance]
            for name, s in db.swod_templates
        ],
    }


def dump_db(db: TemplateDb) -> bytes:
    out = [MAGIC, struct.pack("<II", db.format_version, 4)]
    for name, payload in _sections(db).items():
        body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        key = name.encode()
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<QI", len(body), zlib.crc32(body)) + body)
    return b"".join(out)


def save_db(db: TemplateDb, path: str | Path) -> None:
    Path(path).write_bytes(dump_db(db))


def loads_db(data: bytes) -> TemplateDb:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptDb("bad magic")
    version, count = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise IncompatibleDbVersion(f"format version {version}, expected {FORMAT_VERSION}")
    pos = 16
    sections: dict[str, object] = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + klen].decode()
            pos += 2 + klen
            size, crc = struct.unpack_from("<QI", data, pos)
            pos += 12
            body = data[pos:pos + size]
            if len(body) != size or zlib.crc32(body) != crc:
                raise CorruptDb(f"section {name!r} truncated or checksum mismatch")
            sections[name] = json.loads(body)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptDb(str(exc)) from exc
    if pos != len(data) or set(sections) != {"meta", "weights", "acfg", "swod"}:
        raise CorruptDb("unexpected section layout")
    try:
        meta, wv = sections["meta"], sections["weights"]
        weights = PatternWeights(
            {MailPattern(p): v for p, v in wv["weight"].items()},
            WindowConfig(**wv["window"]),
            wv["provenance"],
        )
        return TemplateDb(
            acfg_templates=tuple((n, _sig_from_json(s)) for n, s in sections["acfg"]),
            swod_templates=tuple(
                (n, SwodSignature(tuple(ws), tuple(ia), prov)) for n, ws, ia, prov in sections["swod"]
            ),
            pattern_weights=weights,
            acfg_threshold=meta["acfg_threshold"],
            swod_k=meta["swod_k"],
            index_len=meta["index_len"],
            combinator=Combinator(meta["combinator"]),
            size_bound=meta["size_bound"],
            format_version=version,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDb(f"malformed payload: {exc}") from exc


def load_db(path: str | Path) -> TemplateDb:
    return loads_db(Path(path).read_bytes())
