"""Pattern-distribution weights, control-flow weights and sorted-vector signatures."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .acfg import Acfg, ProgramSignatureAcfg
from .mail import PATTERNS, MailPattern, MailProgram, MailStatement


class EmptyCorpus(ValueError):
    pass


class EmptyProgram(ValueError):
    pass


class StatementNotInGraph(KeyError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    """Weight derivation settings.

    ``width``/``stride`` switch the distribution to an average over sliding
    windows of statements; left unset, whole-corpus frequencies are used.
    """

    scale: int = 100
    clamp: int = 50
    width: int | None = None
    stride: int | None = None

    def to_dict(self) -> dict:
        return {"scale": self.scale, "clamp": self.clamp, "width": self.width, "stride": self.stride}


@dataclass(frozen=True)
class CfWeightConfig:
    control: int = 4
    in_degree: int = 2
    out_degree: int = 2


@dataclass(frozen=True)
class PatternWeights:
    weight: Mapping[MailPattern, int]
    window: WindowConfig = WindowConfig()
    provenance: str = ""

    def __post_init__(self):
        full = {p: int(self.weight.get(p, 0)) for p in PATTERNS}
        object.__setattr__(self, "weight", full)

    def __getitem__(self, p: MailPattern) -> int:
        return self.weight[p]

    @classmethod
    def zeros(cls) -> "PatternWeights":
        return cls({})


@dataclass(frozen=True)
class SwodSignature:
    weights_sorted: tuple[int, ...]
    index_array: tuple[int, ...]
    provenance: str = field(default="", compare=False)


def _frequencies(patterns: Iterable[MailPattern]) -> dict[MailPattern, float]:
    cnt = Counter(patterns)
    total = sum(cnt.values())
    return {p: cnt[p] / total for p in PATTERNS} if total else {}


def pattern_distribution(
    corpus: list[MailProgram], window: WindowConfig | None = None
) -> dict[MailPattern, float]:
    """Relative frequency of every pattern over all statements of ``corpus``."""
    if not corpus or not any(m.statements for m in corpus):
        raise EmptyCorpus("pattern distribution needs at least one statement")
    if window is None or not window.width:
        return _frequencies(s.pattern for m in corpus for s in m.statements)
    width, stride = window.width, window.stride or window.width
    acc = dict.fromkeys(PATTERNS, 0.0)
    n = 0
    for m in corpus:
        seq = [s.pattern for s in m.statements]
        starts = range(0, max(len(seq) - width, 0) + 1, stride) if seq else ()
        for i in starts:
            for p, f in _frequencies(seq[i:i + width]).items():
                acc[p] += f
            n += 1
    return {p: v / n for p, v in acc.items()}


def _round_half_away(x: float) -> int:
    # Trim float noise first so 100 * (0.3 - 0.1) lands on 20.
    x = round(x, 9)
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def compute_swod_weights(
    mal: Mapping[MailPattern, float],
    ben: Mapping[MailPattern, float],
    window: WindowConfig = WindowConfig(),
    provenance: str = "",
) -> PatternWeights:
    w = {}
    for p in PATTERNS:
        raw = _round_half_away(window.scale * (mal.get(p, 0.0) - ben.get(p, 0.0)))
        w[p] = max(-window.clamp, min(window.clamp, raw))
    return PatternWeights(w, window, provenance)


def _cfweight_in_block(s: MailStatement, g: Acfg, block: int, c: CfWeightConfig) -> int:
    b = g.blocks[block]
    total = c.control if s.is_control() else 0
    if b.leader.index == s.index:
        total += c.in_degree * len(g.pred[block])
    if b.terminator.index == s.index:
        total += c.out_degree * len(g.succ[block])
    return total


def cfweight(s: MailStatement, g: Acfg, c: CfWeightConfig = CfWeightConfig()) -> int:
    block = g.block_of_statement.get(s.index)
    if block is None:
        raise StatementNotInGraph(s.index)
    return _cfweight_in_block(s, g, block, c)


def bucket_sums(values: list[int], length: int) -> tuple[int, ...]:
    """Sum ``values`` into ``length`` equal-count buckets; the last takes the remainder."""
    size = len(values) // length
    out = []
    for i in range(length):
        lo = i * size
        hi = (i + 1) * size if i < length - 1 else len(values)
        out.append(sum(values[lo:hi]))
    return tuple(out)


def build_swod_signature(
    m: MailProgram,
    sig: ProgramSignatureAcfg,
    w: PatternWeights,
    length: int = 16,
    c: CfWeightConfig = CfWeightConfig(),
) -> SwodSignature:
    """Per-statement totals (control-flow weight + pattern weight), sorted and bucketed.

    A statement lying in several ACFGs takes its role from the first one.
    Jumps folded into edges belong to no block and score only their control
    coefficient.
    """
    if not m.statements:
        raise EmptyProgram(m.provenance.name or "program")
    if length < 1:
        raise ValueError("index length must be positive")
    where: dict[int, tuple[Acfg, int]] = {}
    for g in sig.acfgs:
        for idx, block in g.block_of_statement.items():
            where.setdefault(idx, (g, block))
    totals = []
    for s in m.statements:
        hit = where.get(s.index)
        if hit is None:
            cf = c.control if s.is_control() else 0
        else:
            cf = _cfweight_in_block(s, hit[0], hit[1], c)
        totals.append(cf + w[s.pattern])
    totals.sort()
    return SwodSignature(tuple(totals), bucket_sums(totals, length), m.provenance.name)


def agreeing_buckets(a: SwodSignature, b: SwodSignature) -> int:
    if len(a.index_array) != len(b.index_array):
        raise LengthMismatch(f"{len(a.index_array)} != {len(b.index_array)}")
    return sum(x == y for x, y in zip(a.index_array, b.index_array))


def match_swod(a: SwodSignature, b: SwodSignature, k: int = 11) -> bool:
    return agreeing_buckets(a, b) >= k


def dump_swod(sig: SwodSignature) -> str:
    return (
        "WEIGHTS " + " ".join(map(str, sig.weights_sorted)) + "\n"
        + "INDEX " + " ".join(map(str, sig.index_array)) + "\n"
    )
