"""Seeded obfuscating rewrites of assembly programs.

Every kind keeps the program's observable behaviour.
Inserted code lands in the address gaps between original instructions when
there is room, so untouched instructions keep their addresses; otherwise the
program is laid out afresh four bytes per instruction and every branch
target is remapped.
"""

from __future__ import annotations

import csv
import enum
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .asmfront import (
    Arch,
    AsmInstruction,
    AsmProgram,
    InsnClass,
    Operand,
    OperandKind,
    format_instruction_body,
    format_listing,
    format_operand,
    is_removable,
    parse_listing,
    register_family,
    sniff_arch,
    sniff_family,
)

log = logging.getLogger(__name__)

RELAYOUT_STEP = 4


class ObfuscationKind(str, enum.Enum):
    NOP_INSERT = "NopInsert"
    JUNK_INSERT = "JunkInsert"
    CALL_INDIRECT = "CallIndirect"
    FUNC_INDIRECT = "FuncIndirect"
    REGISTER_RENAME = "RegisterRename"
    BLOCK_REORDER = "BlockReorder"
    GOTO_HEAVY = "GotoHeavy"


class NotApplicable(ValueError):
    """The program offers no site for the requested transformation."""


@dataclass
class _Slot:
    ins: AsmInstruction
    key: int
    labels: list[str] = field(default_factory=list)
    inserted: bool = False


class _Layout:
    """Mutable instruction list; inserted code gets negative keys."""

    def __init__(self, p: AsmProgram):
        self.p = p
        names: dict[int, list[str]] = {}
        for name, addr in p.labels:
            names.setdefault(addr, []).append(name)
        self.slots = [_Slot(i, i.address, names.get(i.address, [])) for i in p.instructions]
        self._next = -1

    def new(self, text: str, labels: Sequence[str] = ()) -> _Slot:
        ins = _make(text, self.p.arch)
        slot = _Slot(ins, self._next, list(labels), True)
        self._next -= 1
        return slot


def _make(body: str, arch: Arch) -> AsmInstruction:
    # Route through the parser so inserted code obeys the listing grammar.
    return parse_listing(f"0: {body}", arch).instructions[0]


def _branch_operand_indices(ins: AsmInstruction) -> list[int]:
    cls = ins.insn_class
    if cls not in (InsnClass.JUMP, InsnClass.COND_JUMP, InsnClass.CALL):
        return []
    return [
        i for i, o in enumerate(ins.operands)
        if o.kind is OperandKind.IMMEDIATE or o.kind is OperandKind.LABEL
    ][-1:]


def _retarget(ins: AsmInstruction, amap: dict[int, int]) -> AsmInstruction:
    ops = list(ins.operands)
    changed = False
    for i in _branch_operand_indices(ins):
        o = ops[i]
        if o.kind is OperandKind.IMMEDIATE and o.value in amap:
            ops[i] = Operand.imm(amap[o.value])
            changed = True
    return replace(ins, operands=tuple(ops)) if changed else ins


def _emit(layout: _Layout, slots: list[_Slot], family: str | None = None) -> AsmProgram:
    addrs: list[int] | None = []
    prev = None
    for s in slots:
        if not s.inserted:
            if prev is not None and s.key <= prev:
                addrs = None
                break
            a = s.key
        else:
            a = prev + 1 if prev is not None else 0
        addrs.append(a)
        prev = a
    if addrs is None:
        base = layout.p.instructions[0].address
        addrs = [base + RELAYOUT_STEP * i for i in range(len(slots))]
    amap = {s.key: a for s, a in zip(slots, addrs)}
    lines = [f"# arch: {layout.p.arch.value}"]
    if family:
        lines.append(f"# family: {family}")
    for s, a in zip(slots, addrs):
        lines.extend(f"{name}:" for name in s.labels)
        lines.append(f"{a:x}: {format_instruction_body(_retarget(s.ins, amap))}")
    return parse_listing("\n".join(lines) + "\n", layout.p.arch, layout.p.name)


def _sites(rng: random.Random, n: int, intensity: float) -> list[int]:
    chosen = [i for i in range(n) if rng.random() < intensity]
    if not chosen and n:
        chosen = [rng.randrange(n)]
    return chosen


# --- insertion kinds ---------------------------------------------------------

def _insert_after(layout: _Layout, rng: random.Random, intensity: float, make) -> list[_Slot]:
    sites = set(_sites(rng, len(layout.slots), intensity))
    out = []
    for i, s in enumerate(layout.slots):
        out.append(s)
        if i in sites:
            out.extend(layout.new(text) for text in make(rng))
    return out


def _nop_insert(layout, rng, intensity):
    return _insert_after(layout, rng, intensity, lambda r: ["NOP"] * r.randint(1, 3))


_JUNK = {
    Arch.X86: ("MOV {r}, {r}", "XCHG {r}, {r}", "LEA {r}, [{r}]", "PREFETCHT0 [{r} + 0x40]",
               "PREFETCHNTA [{r}]", "PAUSE", "FNOP"),
    Arch.ARM: ("MOV {r}, {r}", "PLD [{r}, #0x40]", "PLDW [{r}]", "YIELD"),
}
_JUNK_REGS = {
    Arch.X86: ("EAX", "EBX", "ECX", "EDX", "ESI", "EDI"),
    Arch.ARM: tuple(f"R{i}" for i in range(11)),
}


def _junk_insert(layout, rng, intensity):
    arch = layout.p.arch

    def make(r):
        text = r.choice(_JUNK[arch]).format(r=r.choice(_JUNK_REGS[arch]))
        assert is_removable(_make(text, arch)), text
        return [text]

    return _insert_after(layout, rng, intensity, make)


# --- call redirection --------------------------------------------------------

def _local_call_sites(layout: _Layout) -> list[tuple[int, int]]:
    """(slot position, operand index) of calls to code inside the program."""
    local = {s.key for s in layout.slots}
    names = dict(layout.p.labels)
    out = []
    for i, s in enumerate(layout.slots):
        if s.ins.insn_class is not InsnClass.CALL:
            continue
        for j in _branch_operand_indices(s.ins):
            o = s.ins.operands[j]
            if (o.kind is OperandKind.IMMEDIATE and o.value in local) or (
                o.kind is OperandKind.LABEL and o.value in names
            ):
                out.append((i, j))
    return out


def _jump_text(arch: Arch, target: Operand) -> str:
    return ("JMP " if arch is Arch.X86 else "B ") + format_operand(target, arch)


def _redirect(layout: _Layout, site: tuple[int, int], stub: _Slot) -> None:
    i, j = site
    s = layout.slots[i]
    ops = list(s.ins.operands)
    ops[j] = Operand.imm(stub.key)
    s.ins = replace(s.ins, operands=tuple(ops))


def _call_indirect(layout, rng, intensity):
    sites = _local_call_sites(layout)
    if not sites:
        raise NotApplicable("no calls to local code")
    stubs = []
    for n, k in enumerate(_sites(rng, len(sites), intensity)):
        i, j = sites[k]
        target = layout.slots[i].ins.operands[j]
        stub = layout.new(_jump_text(layout.p.arch, target), [f"cnd_stub_{n}"])
        _redirect(layout, sites[k], stub)
        stubs.append(stub)
    return layout.slots + stubs


def _func_indirect(layout, rng, intensity):
    sites = _local_call_sites(layout)
    if not sites:
        raise NotApplicable("no calls to local code")
    by_target: dict[object, list[tuple[int, int]]] = {}
    for i, j in sites:
        o = layout.slots[i].ins.operands[j]
        by_target.setdefault((o.kind, o.value), []).append((i, j))
    targets = sorted(by_target, key=str)
    tramps = []
    for n, k in enumerate(_sites(rng, len(targets), intensity)):
        kind, value = targets[k]
        tramp = layout.new(_jump_text(layout.p.arch, Operand(kind, value)), [f"fnd_tramp_{n}"])
        for site in by_target[targets[k]]:
            _redirect(layout, site, tramp)
        tramps.append(tramp)
    return layout.slots + tramps


# --- register renaming -------------------------------------------------------

_X86_VIEWS = {
    "A": ("EAX", "RAX"), "B": ("EBX", "RBX"), "C": ("ECX", "RCX"),
    "D": ("EDX", "RDX"), "SI": ("ESI", "RSI"), "DI": ("EDI", "RDI"),
}
# Families touched implicitly by these mnemonics cannot be renamed.
_X86_IMPLICIT = {
    "MUL": "AD", "DIV": "AD", "IDIV": "AD", "CDQ": "AD", "CWD": "AD", "CWDE": "A",
    "CBW": "A", "CPUID": "ABCD", "RDTSC": "AD", "XLAT": "AB", "LOOP": "C",
    "LOOPE": "C", "LOOPNE": "C", "JECXZ": "C", "JCXZ": "C",
}
_X86_STRING = ("MOVS", "STOS", "LODS", "SCAS", "CMPS")
_ARM_LIST_ORDER = {"SP": 13, "LR": 14, "PC": 15}


def _x86_pool(p: AsmProgram) -> list[str]:
    pool = set(_X86_VIEWS)
    for ins in p.instructions:
        m = ins.mnemonic
        fams = _X86_IMPLICIT.get(m, "")
        if m == "IMUL" and len(ins.operands) == 1:
            fams = "AD"
        if m.startswith(_X86_STRING) or ins.prefixes:
            pool -= {"SI", "DI", "C", "A"}
        if m in ("SHL", "SHR", "SAR", "ROL", "ROR", "RCL", "RCR", "SHLD", "SHRD"):
            if any(o.kind is OperandKind.REGISTER and o.value == "CL" for o in ins.operands):
                pool.discard("C")
        if ins.insn_class is InsnClass.CALL:
            pool.discard("A")  # return value register
        pool -= {f for f in ("A", "B", "C", "D") if f in fams}
        for o in ins.operands:
            for r in o.registers():
                fam = register_family(r, p.arch)
                if fam in pool and r not in _X86_VIEWS[fam]:
                    pool.discard(fam)  # sub-register views have no safe image
    return sorted(pool)


def _arm_pool(p: AsmProgram) -> list[str]:
    calls = any(i.insn_class is InsnClass.CALL for i in p.instructions)
    lo = 4 if calls else 0
    return [f"R{i}" for i in range(lo, 11)]


def rename_map(p: AsmProgram, seed: int, intensity: float = 1.0) -> dict[str, str]:
    """Register renaming applied by RegisterRename, as ``{old: new}`` full names.

    x86 entries use 32-bit names; the 64-bit view of a family follows it.
    """
    rng = random.Random(f"{ObfuscationKind.REGISTER_RENAME.value}:{seed}")
    pool = _x86_pool(p) if p.arch is Arch.X86 else _arm_pool(p)
    if len(pool) < 2:
        raise NotApplicable("fewer than two renamable registers")
    m = max(2, round(intensity * len(pool)))
    chosen = rng.sample(pool, m)
    fam_map = dict(zip(chosen, chosen[1:] + chosen[:1]))
    if p.arch is Arch.X86:
        return {_X86_VIEWS[a][0]: _X86_VIEWS[b][0] for a, b in fam_map.items()}
    return fam_map


def _full_name_map(mapping: dict[str, str], arch: Arch) -> dict[str, str]:
    if arch is Arch.ARM:
        return dict(mapping)
    out = {}
    by32 = {v[0]: v for v in _X86_VIEWS.values()}
    for a, b in mapping.items():
        for va, vb in zip(by32[a], by32[b]):
            out[va] = vb
    return out


def _rename_operand(o: Operand, names: dict[str, str]) -> Operand:
    if o.kind is OperandKind.REGISTER:
        return Operand.reg(names.get(o.value, o.value))
    if o.kind is OperandKind.MEMORY:
        mem = o.value
        return Operand(o.kind, replace(
            mem,
            base=names.get(mem.base, mem.base) if mem.base else mem.base,
            index=names.get(mem.index, mem.index) if mem.index else mem.index,
        ))
    return o


def _arm_reg_rank(name: str) -> int:
    return _ARM_LIST_ORDER.get(name, int(name[1:]) if re.fullmatch(r"R\d+", name) else 99)


def _register_rename(layout, rng, intensity, seed):
    names = _full_name_map(rename_map(layout.p, seed, intensity), layout.p.arch)
    for s in layout.slots:
        ops = tuple(_rename_operand(o, names) for o in s.ins.operands)
        if layout.p.arch is Arch.ARM and s.ins.insn_class in (InsnClass.PUSH_ALL, InsnClass.POP_ALL):
            base = s.ins.decoded[1]
            head = () if base in ("PUSH", "POP") else ops[:1]
            regs = ops[len(head):]
            ops = head + tuple(sorted(regs, key=lambda o: _arm_reg_rank(o.value)))
        s.ins = replace(s.ins, operands=ops)
    return layout.slots


# --- layout shuffling --------------------------------------------------------

def _regions(layout: _Layout) -> list[tuple[int, int]]:
    p = layout.p
    if not p.function_bounds:
        return [(0, len(layout.slots))]
    out = []
    keys = [s.key for s in layout.slots]
    for start, end in p.function_bounds:
        lo = next((i for i, k in enumerate(keys) if k >= start), len(keys))
        hi = next((i for i, k in enumerate(keys) if k >= end), len(keys))
        if lo < hi:
            out.append((lo, hi))
    return out


def _unconditional(ins: AsmInstruction) -> bool:
    cls = ins.insn_class
    if cls in (InsnClass.JUMP, InsnClass.RETURN, InsnClass.HALT):
        return not ins.condition
    return ins.is_control_transfer() and cls not in (InsnClass.CALL, InsnClass.COND_JUMP) \
        and not ins.condition


def _chunks(slots: list[_Slot], lo: int, hi: int) -> list[list[_Slot]]:
    """Split slots[lo:hi] at branch targets and after block-ending transfers."""
    keys = {s.key: i for i, s in enumerate(slots[lo:hi], lo)}
    starts = {lo}
    for i in range(lo, hi):
        ins = slots[i].ins
        if ins.is_control_transfer() and ins.insn_class is not InsnClass.CALL:
            if i + 1 < hi:
                starts.add(i + 1)
            if ins.insn_class in (InsnClass.JUMP, InsnClass.COND_JUMP):
                for j in _branch_operand_indices(ins):
                    o = ins.operands[j]
                    if o.kind is OperandKind.IMMEDIATE and o.value in keys:
                        starts.add(keys[o.value])
    bounds = sorted(starts) + [hi]
    return [slots[a:b] for a, b in zip(bounds, bounds[1:])]


def _link(layout: _Layout, order: list[list[_Slot]], follow: dict[int, int | None]) -> list[_Slot]:
    """Concatenate chunks, adding a jump wherever a fall-through was broken."""
    out: list[_Slot] = []
    for n, chunk in enumerate(order):
        out.extend(chunk)
        want = follow[id(chunk)]
        nxt = order[n + 1][0].key if n + 1 < len(order) else None
        if want is not None and want != nxt:
            out.append(layout.new(_jump_text(layout.p.arch, Operand.imm(want))))
    return out


def _fallthrough_map(chunks: list[list[_Slot]], after: int | None) -> dict[int, int | None]:
    follow = {}
    for n, chunk in enumerate(chunks):
        if _unconditional(chunk[-1].ins):
            follow[id(chunk)] = None
        else:
            follow[id(chunk)] = chunks[n + 1][0].key if n + 1 < len(chunks) else after
    return follow


def _reorder_regions(layout: _Layout, arrange, extra=None) -> list[_Slot]:
    out: list[_Slot] = []
    slots = layout.slots
    regions = _regions(layout)
    covered = 0
    for lo, hi in regions:
        out.extend(slots[covered:lo])
        chunks = _chunks(slots, lo, hi)
        after = slots[hi].key if hi < len(slots) else None
        if extra:
            chunks, tail = extra(chunks)
        else:
            tail = []
        follow = _fallthrough_map(chunks, after)
        order = [chunks[0]] + arrange(chunks[1:])
        out.extend(_link(layout, order, follow))
        out.extend(tail)
        covered = hi
    out.extend(slots[covered:])
    return out


def _block_reorder(layout, rng, intensity):
    movable = [len(_chunks(layout.slots, lo, hi)) - 1 for lo, hi in _regions(layout)]
    if max(movable, default=0) < 2:
        raise NotApplicable("no function with two movable blocks")

    def arrange(rest):
        if len(rest) < 2:
            return rest
        k = min(len(rest), max(2, round(intensity * len(rest))))
        picked = sorted(rng.sample(range(len(rest)), k))
        moved = picked[1:] + picked[:1]
        out = list(rest)
        for src, dst in zip(picked, moved):
            out[dst] = rest[src]
        return out

    return _reorder_regions(layout, arrange)


_X86_FLAG_READERS = ("CMOV", "SET", "ADC", "SBB", "PUSHF")


def _reads_flags(ins) -> bool:
    cls, base, cond = ins.decoded
    if cls is InsnClass.COND_JUMP or cond:
        return True
    return ins.arch is Arch.X86 and ins.mnemonic.startswith(_X86_FLAG_READERS)


def _writes_flags(ins) -> bool:
    cls, base, _ = ins.decoded
    if cls is InsnClass.COMPARE:
        return True
    if ins.arch is Arch.X86:
        return cls in (InsnClass.ARITH, InsnClass.LOGIC) and ins.mnemonic not in ("LEA", "NOT")
    return ins.mnemonic.startswith(base + "S") and cls in (InsnClass.ARITH, InsnClass.LOGIC)


def _flags_dead(rest) -> bool:
    """True when flags are overwritten before being read in ``rest``.

    Calls and returns clobber flags; any other way out of the chunk is
    treated as a possible use.
    """
    for s in rest:
        if _reads_flags(s.ins):
            return False
        if _writes_flags(s.ins):
            return True
        if s.ins.insn_class in (InsnClass.CALL, InsnClass.RETURN):
            return True
    return False


def _split_point(chunk) -> int | None:
    """Index nearest the middle where a compare may be inserted safely."""
    mid = len(chunk) // 2
    for m in sorted(range(1, len(chunk)), key=lambda i: (abs(i - mid), i)):
        if _flags_dead(chunk[m:]):
            return m
    return None


def _goto_heavy(layout, rng, intensity):
    arch = layout.p.arch
    sp = "ESP" if arch is Arch.X86 else "SP"

    def split(chunks):
        out, dead = [], []
        for chunk in chunks:
            if len(chunk) < 2 or rng.random() >= intensity:
                out.append(chunk)
                continue
            m = _split_point(chunk)
            if m is None:
                out.append(chunk)
                continue
            head, rest = chunk[:m], chunk[m:]
            junk = layout.new(("XOR EAX, 0x5a" if arch is Arch.X86 else "EOR R0, R0, #0x5a"))
            back = layout.new(_jump_text(arch, Operand.imm(rest[0].key)))
            cond = "JNE " if arch is Arch.X86 else "BNE "
            pred = [layout.new(f"CMP {sp}, {sp}"), layout.new(cond + hex(junk.key))]
            out.append(head + pred)
            out.append(rest)
            dead.append([junk, back])
        return out, [s for d in dead for s in d]

    return _reorder_regions(layout, lambda rest: list(reversed(rest)), split)


# --- entry points ------------------------------------------------------------

def mutate(p: AsmProgram, kind: ObfuscationKind | str, seed: int, intensity: float = 0.5,
           family: str | None = None) -> AsmProgram:
    """Apply one obfuscation; deterministic in ``(p, kind, seed, intensity)``."""
    kind = ObfuscationKind(kind)
    if not 0 < intensity <= 1:
        raise ValueError("intensity must lie in (0, 1]")
    rng = random.Random(f"{kind.value}:{seed}:{intensity}")
    layout = _Layout(p)
    if kind is ObfuscationKind.NOP_INSERT:
        slots = _nop_insert(layout, rng, intensity)
    elif kind is ObfuscationKind.JUNK_INSERT:
        slots = _junk_insert(layout, rng, intensity)
    elif kind is ObfuscationKind.CALL_INDIRECT:
        slots = _call_indirect(layout, rng, intensity)
    elif kind is ObfuscationKind.FUNC_INDIRECT:
        slots = _func_indirect(layout, rng, intensity)
    elif kind is ObfuscationKind.REGISTER_RENAME:
        slots = _register_rename(layout, rng, intensity, seed)
    elif kind is ObfuscationKind.BLOCK_REORDER:
        slots = _block_reorder(layout, rng, intensity)
    else:
        slots = _goto_heavy(layout, rng, intensity)
    return _emit(layout, slots, family)


MANIFEST_FIELDS = ("variant_path", "base_path", "kind", "seed", "intensity")


def generate_variant_corpus(seeds: Iterable[int], kinds: Iterable[ObfuscationKind | str],
                            base, out_dir: str | Path, intensity: float = 0.5):
    """Write every base x kind x seed variant under ``out_dir``.

    ``base`` is a :class:`~mailscan.evalkit.LabeledDataset`; variants keep
    their base's family and label.  Kinds with no site in a base are skipped
    and logged.  Returns the variant dataset; ``variants.csv`` records
    provenance.
    """
    from .evalkit import Item, LabeledDataset

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds, kinds = list(seeds), [ObfuscationKind(k) for k in kinds]
    items, rows = [], []
    for item in sorted(base.items, key=lambda i: i.path):
        src = base.resolve(item)
        text = src.read_text(encoding="utf-8")
        arch = sniff_arch(text, item.arch)
        family = item.family or sniff_family(text) or src.stem
        p = parse_listing(text, arch, str(src))
        for kind in kinds:
            for seed in seeds:
                try:
                    v = mutate(p, kind, seed, intensity, family)
                except NotApplicable as exc:
                    log.info("skip %s %s seed %d: %s", src.name, kind.value, seed, exc)
                    continue
                name = f"{src.stem}__{kind.value}__s{seed}.lst"
                (out / name).write_text(to_listing(v, family), encoding="utf-8")
                items.append(Item(name, item.label, family, arch.value))
                rows.append((name, item.path, kind.value, seed, intensity))
    with (out / "variants.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    ds = LabeledDataset(tuple(items), out)
    ds.write_manifest(out / "manifest.csv")
    return ds


def to_listing(p: AsmProgram, family: str | None) -> str:
    text = format_listing(p)
    if family:
        head, rest = text.split("\n", 1)
        text = f"{head}\n# family: {family}\n{rest}"
    return text
