"""Annotated control flow graphs over MAIL statements."""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

from .mail import MailPattern, MailProgram, MailStatement, StatementKind


@dataclass(frozen=True)
class Block:
    id: int
    statements: tuple[MailStatement, ...]
    pattern_seq: tuple[MailPattern, ...] = field(init=False)

    def __post_init__(self):
        if not self.statements:
            raise ValueError("empty block")
        object.__setattr__(self, "pattern_seq", tuple(s.pattern for s in self.statements))

    @property
    def leader(self) -> MailStatement:
        return self.statements[0]

    @property
    def terminator(self) -> MailStatement:
        return self.statements[-1]


@dataclass(frozen=True)
class Acfg:
    blocks: tuple[Block, ...]
    edges: frozenset[tuple[int, int]]
    entry: int
    function_label: str | None = None

    def __post_init__(self):
        ids = [b.id for b in self.blocks]
        if ids != list(range(len(ids))):
            raise ValueError("block ids must be dense and ordered")
        if not 0 <= self.entry < len(ids):
            raise ValueError("entry block missing")
        for a, b in self.edges:
            if not (0 <= a < len(ids) and 0 <= b < len(ids)):
                raise ValueError(f"edge ({a}, {b}) has a missing endpoint")

    def __len__(self) -> int:
        return len(self.blocks)

    @cached_property
    def succ(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.blocks]
        for a, b in sorted(self.edges):
            out[a].append(b)
        return tuple(tuple(x) for x in out)

    @cached_property
    def pred(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.blocks]
        for a, b in sorted(self.edges):
            out[b].append(a)
        return tuple(tuple(x) for x in out)

    @cached_property
    def block_of_statement(self) -> dict[int, int]:
        return {s.index: b.id for b in self.blocks for s in b.statements}

    def reachable(self, root: int | None = None) -> set[int]:
        root = self.entry if root is None else root
        seen = {root}
        todo = deque([root])
        while todo:
            for n in self.succ[todo.popleft()]:
                if n not in seen:
                    seen.add(n)
                    todo.append(n)
        return seen

    def shape(self) -> tuple:
        """Pattern-level structure, independent of addresses and sketches."""
        return (tuple(b.pattern_seq for b in self.blocks), tuple(sorted(self.edges)), self.entry)


@dataclass(frozen=True)
class ProgramSignatureAcfg:
    acfgs: tuple[Acfg, ...]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.acfgs)

    def shape(self) -> tuple:
        return tuple(g.shape() for g in self.acfgs)


def _regions(m: MailProgram) -> list[tuple[int, int, str | None]]:
    stmts = m.statements
    if not m.function_bounds:
        return [(0, len(stmts), None)] if stmts else []
    addrs = [s.origin_address for s in stmts]
    names: dict[int, str] = {}
    for name, addr in m.labels:
        names.setdefault(addr, name)
    out = []
    for start, end in m.function_bounds:
        lo, hi = bisect.bisect_left(addrs, start), bisect.bisect_left(addrs, end)
        if lo < hi:
            out.append((lo, hi, names.get(start)))
    return out


def _region_graphs(
    stmts: tuple[MailStatement, ...],
    entries: list[int],
    label: str | None,
    thread_jumps: bool,
) -> list[Acfg]:
    n = len(stmts)
    addrs = [s.origin_address for s in stmts]
    lo_addr, hi_addr = addrs[0], addrs[-1]

    def index_of(target) -> int | None:
        if not isinstance(target, int) or not lo_addr <= target <= hi_addr:
            return None
        return bisect.bisect_left(addrs, target)

    leaders = {0}
    leaders.update(i for i in (index_of(e) for e in entries) if i is not None)
    for i, s in enumerate(stmts):
        if s.ends_block() and i + 1 < n:
            leaders.add(i + 1)
        if s.kind in (StatementKind.JUMP, StatementKind.CONDITIONAL):
            j = index_of(s.target)
            if j is not None:
                leaders.add(j)
    starts = sorted(leaders)
    spans = list(zip(starts, starts[1:] + [n]))
    block_at = {lo: k for k, (lo, _) in enumerate(spans)}

    body: list[list[MailStatement]] = []
    succs: list[list[int]] = []
    for k, (lo, hi) in enumerate(spans):
        stmts_k = list(stmts[lo:hi])
        last = stmts_k[-1]
        fall = [k + 1] if k + 1 < len(spans) else []
        tgt = index_of(last.target) if last.kind in (StatementKind.JUMP, StatementKind.CONDITIONAL) else None
        tgt_block = [block_at[tgt]] if tgt is not None else []
        if last.kind is StatementKind.JUMP:
            out = tgt_block
            if thread_jumps and tgt_block and last.pattern is MailPattern.JUMP_CONSTANT:
                stmts_k.pop()
        elif last.kind is StatementKind.CONDITIONAL:
            out = fall + [b for b in tgt_block if b not in fall]
        elif last.kind is StatementKind.HALT:
            out = []
        else:
            out = fall
        body.append(stmts_k)
        succs.append(out)

    # Blocks emptied by threading are pure gotos: forward through them.
    def forward(k: int) -> int:
        seen = set()
        while not body[k]:
            if k in seen:
                return -1
            seen.add(k)
            k = succs[k][0]
        return k

    for k in range(len(spans)):
        if not body[k] and forward(k) < 0:
            lo, hi = spans[k]
            body[k] = [stmts[hi - 1]]
    fwd = [forward(k) for k in range(len(spans))]
    edges = {k: sorted({fwd[t] for t in succs[k]}) for k in range(len(spans)) if body[k]}

    roots = [fwd[block_at[i]] for i in sorted(index_of(e) for e in entries if index_of(e) is not None)]
    graphs: list[Acfg] = []
    covered: set[int] = set()
    pending = deque(dict.fromkeys(roots))
    live = [k for k in range(len(spans)) if body[k]]
    while True:
        if not pending:
            rest = [k for k in live if k not in covered]
            if not rest:
                break
            pending.append(rest[0])
        root = pending.popleft()
        seen = {root}
        todo = deque([root])
        while todo:
            for t in edges[todo.popleft()]:
                if t not in seen:
                    seen.add(t)
                    todo.append(t)
        order = sorted(seen)
        ids = {k: i for i, k in enumerate(order)}
        blocks = tuple(Block(ids[k], tuple(body[k])) for k in order)
        e = frozenset((ids[a], ids[b]) for a in order for b in edges[a])
        graphs.append(Acfg(blocks, e, ids[root], label))
        covered |= seen
    return graphs


def build_acfgs(m: MailProgram, thread_jumps: bool = True) -> ProgramSignatureAcfg:
    """One ACFG per function region and entry point, plus one per unreachable leader.

    With ``thread_jumps`` an unconditional jump to a known in-region target is
    carried by its edge only; blocks holding nothing but such a jump are
    bypassed.  Unknown-target branches end their block and add no edge.
    """
    graphs: list[Acfg] = []
    for lo, hi, label in _regions(m):
        stmts = m.statements[lo:hi]
        first, last = stmts[0].origin_address, stmts[-1].origin_address
        entries = sorted({first} | {e for e in m.entry_points if first <= e <= last})
        graphs.extend(_region_graphs(stmts, entries, label, thread_jumps))
    return ProgramSignatureAcfg(tuple(graphs), m.provenance.name)


def merge_blocks(g: Acfg) -> Acfg:
    """Fuse chains A->B where A has the single successor B and B the single predecessor A."""

    def next_in_chain(a: int) -> int | None:
        if len(g.succ[a]) != 1:
            return None
        b = g.succ[a][0]
        if b == a or b == g.entry or len(g.pred[b]) != 1:
            return None
        if g.blocks[a].terminator.ends_block():
            return None
        return b

    absorbed = {b for a in range(len(g)) if (b := next_in_chain(a)) is not None}
    if not absorbed:
        return g
    heads = [a for a in range(len(g)) if a not in absorbed]
    chain_of: dict[int, list[int]] = {}
    for h in heads:
        chain = [h]
        while (b := next_in_chain(chain[-1])) is not None:
            chain.append(b)
        chain_of[h] = chain
    order = sorted(heads, key=lambda h: g.blocks[h].leader.index)
    new_id = {h: i for i, h in enumerate(order)}
    blocks = tuple(
        Block(new_id[h], tuple(s for k in chain_of[h] for s in g.blocks[k].statements))
        for h in order
    )
    edges = frozenset(
        (new_id[h], new_id[t]) for h in order for t in g.succ[chain_of[h][-1]]
    )
    return Acfg(blocks, edges, new_id[g.entry], g.function_label)


def merge_all(sig: ProgramSignatureAcfg) -> ProgramSignatureAcfg:
    return ProgramSignatureAcfg(tuple(merge_blocks(g) for g in sig.acfgs), sig.provenance)


def dump_acfg(g: Acfg) -> str:
    lines = [f"BLOCK {b.id}: {','.join(p.value for p in b.pattern_seq)}" for b in g.blocks]
    lines.extend(f"EDGE {a} {b}" for a, b in sorted(g.edges))
    return "\n".join(lines) + "\n"


def dump_signature(sig: ProgramSignatureAcfg) -> str:
    out = []
    for i, g in enumerate(sig.acfgs):
        out.append(f"ACFG {i} {g.function_label or '-'} entry={g.entry}\n")
        out.append(dump_acfg(g))
    return "".join(out)
