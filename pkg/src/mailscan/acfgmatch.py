"""Pattern-verified subgraph matching of ACFGs and program-level similarity."""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass

from .acfg import Acfg, ProgramSignatureAcfg

log = logging.getLogger(__name__)

DEFAULT_SIZE_BOUND = 256


class RejectReason(str, enum.Enum):
    NO_ISOMORPHISM = "NoIsomorphism"
    PATTERN_MISMATCH = "PatternMismatch"
    SIZE_BOUND = "SizeBound"


class EmptySignature(ValueError):
    pass


@dataclass(frozen=True)
class MatchResult:
    matched: bool
    mapping: dict[int, int] | None = None
    reject_reason: RejectReason | None = None


@dataclass(frozen=True)
class SimilarityScore:
    matched_count: int
    template_count: int
    skipped: int = 0

    @property
    def value(self) -> float:
        if self.template_count == 0:
            return 0.0
        return self.matched_count / self.template_count


def _search_order(t: Acfg, cands: list[list[int]]) -> list[int]:
    # Most constrained first, then grow along edges so every later node has
    # mapped neighbours to check against.
    n = len(t)
    nbrs = [set(t.succ[u]) | set(t.pred[u]) for u in range(n)]
    order: list[int] = []
    placed = set()
    while len(order) < n:
        frontier = [u for u in range(n) if u not in placed and nbrs[u] & placed]
        pool = frontier or [u for u in range(n) if u not in placed]
        u = min(pool, key=lambda x: (len(cands[x]), -len(nbrs[x]), x))
        order.append(u)
        placed.add(u)
    return order


def find_embedding(template: Acfg, candidate: Acfg, use_patterns: bool = True) -> dict[int, int] | None:
    """Injective, edge-preserving map of template blocks into candidate blocks.

    With ``use_patterns`` a template block may only map to a candidate block
    with an identical pattern sequence.  Returns the first mapping found.
    """
    t, c = template, candidate
    if len(t) > len(c) or len(t.edges) > len(c.edges):
        return None
    c_edges = c.edges
    c_loops = {a for a, b in c_edges if a == b}
    by_seq: dict[tuple, list[int]] | None = None
    if use_patterns:
        by_seq = {}
        for b in c.blocks:
            by_seq.setdefault(b.pattern_seq, []).append(b.id)

    cands: list[list[int]] = []
    for b in t.blocks:
        u = b.id
        pool = by_seq.get(b.pattern_seq, []) if by_seq is not None else range(len(c))
        loop = (u, u) in t.edges
        ok = [
            v for v in pool
            if len(c.succ[v]) >= len(t.succ[u])
            and len(c.pred[v]) >= len(t.pred[u])
            and (not loop or v in c_loops)
        ]
        if not ok:
            return None
        cands.append(ok)

    order = _search_order(t, cands)
    out_nb = [[w for w in t.succ[u] if w != u] for u in range(len(t))]
    in_nb = [[w for w in t.pred[u] if w != u] for u in range(len(t))]
    mapping: dict[int, int] = {}
    used: set[int] = set()

    def extend(depth: int) -> bool:
        if depth == len(order):
            return True
        u = order[depth]
        for v in cands[u]:
            if v in used:
                continue
            if any(w in mapping and (v, mapping[w]) not in c_edges for w in out_nb[u]):
                continue
            if any(w in mapping and (mapping[w], v) not in c_edges for w in in_nb[u]):
                continue
            mapping[u] = v
            used.add(v)
            if extend(depth + 1):
                return True
            del mapping[u]
            used.discard(v)
        return False

    return dict(mapping) if extend(0) else None


def match_acfg(template: Acfg, candidate: Acfg, size_bound: int = DEFAULT_SIZE_BOUND) -> MatchResult:
    if len(template) > size_bound:
        return MatchResult(False, None, RejectReason.SIZE_BOUND)
    mapping = find_embedding(template, candidate, use_patterns=True)
    if mapping is not None:
        return MatchResult(True, mapping)
    if find_embedding(template, candidate, use_patterns=False) is not None:
        return MatchResult(False, None, RejectReason.PATTERN_MISMATCH)
    return MatchResult(False, None, RejectReason.NO_ISOMORPHISM)


class ProgramIndex:
    """Inverted index from block pattern sequence to the program ACFGs holding it."""

    def __init__(self, sig: ProgramSignatureAcfg):
        self.sig = sig
        self.counts = [Counter(b.pattern_seq for b in g.blocks) for g in sig.acfgs]
        self.by_seq: dict[tuple, set[int]] = {}
        for j, cnt in enumerate(self.counts):
            for seq in cnt:
                self.by_seq.setdefault(seq, set()).add(j)

    def candidates(self, template: Acfg) -> list[int]:
        need = Counter(b.pattern_seq for b in template.blocks)
        pools = []
        for seq in need:
            pool = self.by_seq.get(seq)
            if not pool:
                return []
            pools.append(pool)
        pools.sort(key=len)
        common = set(pools[0]).intersection(*pools[1:])
        return sorted(
            j for j in common
            if all(self.counts[j][seq] >= k for seq, k in need.items())
        )

    def contains(self, template: Acfg) -> bool:
        return any(
            find_embedding(template, self.sig.acfgs[j]) is not None
            for j in self.candidates(template)
        )


def similarity(
    template_sig: ProgramSignatureAcfg,
    program_sig: ProgramSignatureAcfg,
    size_bound: int = DEFAULT_SIZE_BOUND,
    index: ProgramIndex | None = None,
) -> SimilarityScore:
    """Fraction of template ACFGs found, pattern-verified, in some program ACFG.

    Templates larger than ``size_bound`` blocks are left out of the
    denominator.  One program ACFG may satisfy several template ACFGs.
    """
    if not template_sig.acfgs or not program_sig.acfgs:
        raise EmptySignature("similarity needs non-empty signatures on both sides")
    index = index or ProgramIndex(program_sig)
    matched = skipped = 0
    for g in template_sig.acfgs:
        if len(g) > size_bound:
            skipped += 1
            continue
        if index.contains(g):
            matched += 1
    if skipped:
        log.warning("%s: %d template ACFG(s) above size bound %d excluded",
                    template_sig.provenance, skipped, size_bound)
    return SimilarityScore(matched, len(template_sig.acfgs) - skipped, skipped)


def altered_fraction(original: ProgramSignatureAcfg, variant: ProgramSignatureAcfg) -> float:
    """Share of original blocks with no unaltered counterpart in the variant.

    A counterpart has the same pattern sequence and the same multisets of
    predecessor and successor pattern sequences.
    """

    def keys(sig: ProgramSignatureAcfg) -> Counter:
        out: Counter = Counter()
        for g in sig.acfgs:
            for b in g.blocks:
                succ = tuple(sorted(g.blocks[x].pattern_seq for x in g.succ[b.id]))
                pred = tuple(sorted(g.blocks[x].pattern_seq for x in g.pred[b.id]))
                out[(b.pattern_seq, succ, pred)] += 1
        return out

    before, after = keys(original), keys(variant)
    total = sum(before.values())
    if total == 0:
        return 0.0
    kept = sum(min(k, after[key]) for key, k in before.items())
    return 1.0 - kept / total
