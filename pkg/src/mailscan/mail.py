"""MAIL intermediate representation and the assembly-to-MAIL translator.

Every statement carries one of the 21 patterns.  Registers in a statement's
operand sketch are abstracted to slots (``r0``, ``r1``, ...) numbered by
first use within the straight-line region the statement sits in, so a
consistent register renaming leaves both patterns and sketches unchanged.
``sp``, ``pc``, ``lr`` and ``flags`` keep their names.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources

from .asmfront import (
    Arch,
    AsmInstruction,
    AsmProgram,
    InsnClass,
    Operand,
    OperandKind,
    SPECIAL_FAMILIES,
    register_family,
)


class MailPattern(str, enum.Enum):
    ASSIGN = "ASSIGN"
    ASSIGN_CONSTANT = "ASSIGN_CONSTANT"
    CONTROL = "CONTROL"
    CONTROL_CONSTANT = "CONTROL_CONSTANT"
    CALL = "CALL"
    CALL_CONSTANT = "CALL_CONSTANT"
    FLAG = "FLAG"
    FLAG_STACK = "FLAG_STACK"
    HALT = "HALT"
    JUMP = "JUMP"
    JUMP_CONSTANT = "JUMP_CONSTANT"
    JUMP_STACK = "JUMP_STACK"
    LIBCALL = "LIBCALL"
    LIBCALL_CONSTANT = "LIBCALL_CONSTANT"
    LOCK = "LOCK"
    STACK = "STACK"
    STACK_CONSTANT = "STACK_CONSTANT"
    TEST = "TEST"
    TEST_CONSTANT = "TEST_CONSTANT"
    UNKNOWN = "UNKNOWN"
    NOTDEFINED = "NOTDEFINED"

    @property
    def is_constant(self) -> bool:
        return self.value.endswith("_CONSTANT")


PATTERNS: tuple[MailPattern, ...] = tuple(MailPattern)


class StatementKind(str, enum.Enum):
    ASSIGNMENT = "Assignment"
    CONDITIONAL = "ControlTransferConditional"
    JUMP = "Jump"
    CALL = "Call"
    LIBCALL = "LibCall"
    STACK = "Stack"
    TEST = "Test"
    FLAG = "Flag"
    HALT = "Halt"
    LOCK = "Lock"
    UNKNOWN = "Unknown"


KIND_PATTERNS: dict[StatementKind, frozenset[MailPattern]] = {
    StatementKind.ASSIGNMENT: frozenset({MailPattern.ASSIGN, MailPattern.ASSIGN_CONSTANT}),
    StatementKind.CONDITIONAL: frozenset({MailPattern.CONTROL, MailPattern.CONTROL_CONSTANT}),
    StatementKind.JUMP: frozenset(
        {MailPattern.JUMP, MailPattern.JUMP_CONSTANT, MailPattern.JUMP_STACK}),
    StatementKind.CALL: frozenset({MailPattern.CALL, MailPattern.CALL_CONSTANT}),
    StatementKind.LIBCALL: frozenset({MailPattern.LIBCALL, MailPattern.LIBCALL_CONSTANT}),
    StatementKind.STACK: frozenset({MailPattern.STACK, MailPattern.STACK_CONSTANT}),
    StatementKind.TEST: frozenset({MailPattern.TEST, MailPattern.TEST_CONSTANT}),
    StatementKind.FLAG: frozenset({MailPattern.FLAG, MailPattern.FLAG_STACK}),
    StatementKind.HALT: frozenset({MailPattern.HALT}),
    StatementKind.LOCK: frozenset({MailPattern.LOCK}),
    StatementKind.UNKNOWN: frozenset({MailPattern.UNKNOWN}),
}

# Statement kinds that end a basic block.
TERMINATORS = frozenset({StatementKind.JUMP, StatementKind.CONDITIONAL, StatementKind.HALT})
CONTROL_KINDS = frozenset({
    StatementKind.JUMP, StatementKind.CONDITIONAL, StatementKind.CALL, StatementKind.LIBCALL,
})

# Non-constant branch targets.
UNKNOWN_TARGET = "?"
STACK_TARGET = "sp"

SP = ("sp",)
FLAGS = ("flags",)


@dataclass(frozen=True)
class MailStatement:
    """One MAIL statement.

    ``operand_sketch`` is a tuple of hashable elements: ``("r", slot)``,
    ``("sp",)``, ``("pc",)``, ``("lr",)``, ``("flags",)``, ``("imm", value)``,
    ``("mem", base, index, scale, disp)`` and ``("sym", name)``.
    ``target`` is a constant address, :data:`STACK_TARGET`,
    :data:`UNKNOWN_TARGET` or ``None`` for statements that do not branch.
    """

    index: int
    origin_address: int
    kind: StatementKind
    pattern: MailPattern
    operand_sketch: tuple
    target: int | str | None = None

    def has_immediate(self) -> bool:
        return any(e[0] == "imm" for e in self.operand_sketch)

    def is_control(self) -> bool:
        return self.kind in CONTROL_KINDS

    def ends_block(self) -> bool:
        return self.kind in TERMINATORS


@dataclass(frozen=True)
class Provenance:
    name: str
    arch: Arch


@dataclass(frozen=True)
class MailProgram:
    statements: tuple[MailStatement, ...]
    entry_points: frozenset[int]
    provenance: Provenance
    function_bounds: tuple[tuple[int, int], ...] | None = None
    labels: tuple[tuple[str, int], ...] = ()

    def __len__(self) -> int:
        return len(self.statements)

    def pattern_histogram(self) -> dict[MailPattern, int]:
        hist = {p: 0 for p in PATTERNS}
        for s in self.statements:
            hist[s.pattern] += 1
        return hist

    def validate(self) -> None:
        prev = None
        for s in self.statements:
            if s.pattern is MailPattern.NOTDEFINED:
                raise ValueError(f"statement {s.index} left NOTDEFINED")
            if s.pattern not in KIND_PATTERNS[s.kind]:
                raise ValueError(f"statement {s.index}: {s.pattern} inconsistent with {s.kind}")
            if s.pattern.is_constant != s.has_immediate():
                raise ValueError(f"statement {s.index}: constant/immediate mismatch")
            if prev is not None and s.origin_address < prev:
                raise ValueError("statements out of address order")
            prev = s.origin_address


def assign_pattern(s: MailStatement) -> MailPattern:
    """Resolve the pattern of a statement from its kind, operands and target."""
    k = s.kind
    const = s.has_immediate()
    if k is StatementKind.ASSIGNMENT:
        return MailPattern.ASSIGN_CONSTANT if const else MailPattern.ASSIGN
    if k is StatementKind.CONDITIONAL:
        return MailPattern.CONTROL_CONSTANT if isinstance(s.target, int) else MailPattern.CONTROL
    if k is StatementKind.JUMP:
        if s.target == STACK_TARGET:
            return MailPattern.JUMP_STACK
        return MailPattern.JUMP_CONSTANT if isinstance(s.target, int) else MailPattern.JUMP
    if k is StatementKind.CALL:
        return MailPattern.CALL_CONSTANT if isinstance(s.target, int) else MailPattern.CALL
    if k is StatementKind.LIBCALL:
        return MailPattern.LIBCALL_CONSTANT if const else MailPattern.LIBCALL
    if k is StatementKind.STACK:
        return MailPattern.STACK_CONSTANT if const else MailPattern.STACK
    if k is StatementKind.TEST:
        return MailPattern.TEST_CONSTANT if const else MailPattern.TEST
    if k is StatementKind.FLAG:
        return MailPattern.FLAG_STACK if SP in s.operand_sketch else MailPattern.FLAG
    if k is StatementKind.HALT:
        return MailPattern.HALT
    if k is StatementKind.LOCK:
        return MailPattern.LOCK
    return MailPattern.UNKNOWN


# --- library symbols ---------------------------------------------------------

def load_library_symbols(text: str | None = None) -> frozenset[str]:
    if text is None:
        text = resources.files("mailscan").joinpath("data/libsymbols.txt").read_text()
    return frozenset(
        line.split("#", 1)[0].strip() for line in text.splitlines()
        if line.split("#", 1)[0].strip()
    )


@lru_cache(maxsize=1)
def default_library_symbols() -> frozenset[str]:
    return load_library_symbols()


def canonical_symbol(name: str) -> str:
    return name.split("@", 1)[0].lstrip("_")


# --- translation -------------------------------------------------------------

_X86_PUSHA_ORDER = ("EAX", "ECX", "EDX", "EBX", "ESP", "EBP", "ESI", "EDI")


@dataclass
class _Draft:
    address: int
    kind: StatementKind
    sketch: list
    target: int | str | None = None


def _raw(op: Operand) -> tuple:
    if op.kind is OperandKind.REGISTER:
        return ("reg", op.value)
    if op.kind is OperandKind.IMMEDIATE:
        return ("imm", op.value)
    if op.kind is OperandKind.LABEL:
        return ("sym", op.value)
    m = op.value
    return ("mem", m.base, m.index, m.scale, m.disp)


class _Translator:
    def __init__(self, program: AsmProgram, libs: frozenset[str]):
        self.arch = program.arch
        self.labels = program.label_map()
        self.libs = libs

    def family(self, reg: str) -> str | None:
        return register_family(reg, self.arch)

    def is_reg(self, op: Operand, family: str) -> bool:
        return op.kind is OperandKind.REGISTER and self.family(op.value) == family

    def resolve(self, op: Operand) -> tuple[int | str, tuple | None]:
        """Branch target and the sketch element that carries it."""
        if op.kind is OperandKind.IMMEDIATE:
            return op.value, ("imm", op.value)
        if op.kind is OperandKind.LABEL and op.value in self.labels:
            addr = self.labels[op.value]
            return addr, ("imm", addr)
        if op.kind is OperandKind.REGISTER and self.family(op.value) == "LR":
            return STACK_TARGET, SP
        return UNKNOWN_TARGET, _raw(op)

    def branch(self, ins: AsmInstruction, op: Operand, conditional: bool, extra=()) -> _Draft:
        target, elem = self.resolve(op)
        sketch = [_raw(o) for o in extra] + [elem]
        if conditional:
            if target == STACK_TARGET:
                target = UNKNOWN_TARGET
            return _Draft(ins.address, StatementKind.CONDITIONAL, sketch, target)
        return _Draft(ins.address, StatementKind.JUMP, sketch, target)

    def call(self, ins: AsmInstruction) -> _Draft:
        if not ins.operands:
            return _Draft(ins.address, StatementKind.CALL, [], UNKNOWN_TARGET)
        head, args = ins.operands[0], ins.operands[1:]
        if head.kind is OperandKind.LABEL and head.value not in self.labels:
            name = canonical_symbol(head.value)
            if name in self.libs:
                sketch = [("sym", name)] + [_raw(a) for a in args]
                return _Draft(ins.address, StatementKind.LIBCALL, sketch)
        target, elem = self.resolve(head)
        if target == STACK_TARGET:
            target, elem = UNKNOWN_TARGET, ("reg", head.value)
        return _Draft(ins.address, StatementKind.CALL, [elem], target)

    def writes_pc(self, ins: AsmInstruction) -> bool:
        return self.arch is Arch.ARM and bool(ins.operands) and self.is_reg(ins.operands[0], "PC")

    def stack_list(self, ins: AsmInstruction, push: bool) -> list[_Draft]:
        ops = list(ins.operands)
        base = None
        _, mnem, cond = ins.decoded
        if mnem not in ("PUSH", "POP"):
            base, ops = ops[0], ops[1:]
        on_stack = base is None or self.is_reg(base, "SP")
        out = []
        for op in ops:
            if not push and self.is_reg(op, "PC"):
                if cond:
                    out.append(_Draft(ins.address, StatementKind.CONDITIONAL, [], UNKNOWN_TARGET))
                elif on_stack:
                    out.append(_Draft(ins.address, StatementKind.JUMP, [SP], STACK_TARGET))
                else:
                    out.append(_Draft(ins.address, StatementKind.JUMP, [_raw(base)], UNKNOWN_TARGET))
                continue
            if on_stack:
                out.append(_Draft(ins.address, StatementKind.STACK, [SP, _raw(op)]))
            else:
                out.append(_Draft(ins.address, StatementKind.ASSIGNMENT, [_raw(op), _raw(base)]))
        return out or [_Draft(ins.address, StatementKind.UNKNOWN, [])]

    def instruction(self, ins: AsmInstruction) -> list[_Draft]:
        cls, mnem, cond = ins.decoded
        a = ins.address
        ops = list(ins.operands)
        out: list[_Draft] = []
        if "LOCK" in ins.prefixes:
            out.append(_Draft(a, StatementKind.LOCK, []))

        if cls in (InsnClass.MOVE, InsnClass.ARITH, InsnClass.LOGIC) and self.writes_pc(ins):
            src = ops[1:]
            is_return = len(src) == 1 and (
                self.is_reg(src[0], "LR")
                or (src[0].kind is OperandKind.MEMORY and self.family(src[0].value.base or "") == "SP")
            )
            if cond:
                out.append(_Draft(a, StatementKind.CONDITIONAL, [_raw(o) for o in src], UNKNOWN_TARGET))
            elif is_return:
                out.append(_Draft(a, StatementKind.JUMP, [SP], STACK_TARGET))
            else:
                out.append(_Draft(a, StatementKind.JUMP, [_raw(o) for o in src], UNKNOWN_TARGET))
        elif cls in (InsnClass.MOVE, InsnClass.ARITH, InsnClass.LOGIC):
            out.append(_Draft(a, StatementKind.ASSIGNMENT, [_raw(o) for o in ops]))
        elif cls is InsnClass.COMPARE:
            out.append(_Draft(a, StatementKind.TEST, [_raw(o) for o in ops]))
        elif cls in (InsnClass.PUSH, InsnClass.POP):
            out.append(_Draft(a, StatementKind.STACK, [SP] + [_raw(o) for o in ops]))
        elif cls in (InsnClass.PUSH_ALL, InsnClass.POP_ALL):
            if self.arch is Arch.X86:
                order = _X86_PUSHA_ORDER if cls is InsnClass.PUSH_ALL else _X86_PUSHA_ORDER[::-1]
                out.extend(_Draft(a, StatementKind.STACK, [SP, ("reg", r)]) for r in order)
            else:
                out.extend(self.stack_list(ins, cls is InsnClass.PUSH_ALL))
        elif cls is InsnClass.LEAVE:
            out.append(_Draft(a, StatementKind.ASSIGNMENT, [("reg", "ESP"), ("reg", "EBP")]))
            out.append(_Draft(a, StatementKind.STACK, [SP, ("reg", "EBP")]))
        elif cls is InsnClass.FLAG:
            out.append(_Draft(a, StatementKind.FLAG, [FLAGS] + [_raw(o) for o in ops]))
        elif cls in (InsnClass.FLAG_PUSH, InsnClass.FLAG_POP):
            out.append(_Draft(a, StatementKind.FLAG, [FLAGS, SP]))
        elif cls is InsnClass.JUMP:
            if ops:
                out.append(self.branch(ins, ops[0], bool(cond)))
            else:
                out.append(_Draft(a, StatementKind.JUMP, [], UNKNOWN_TARGET))
        elif cls is InsnClass.COND_JUMP:
            if mnem in ("CBZ", "CBNZ") and len(ops) == 2:
                out.append(self.branch(ins, ops[1], True, extra=ops[:1]))
            elif ops:
                out.append(self.branch(ins, ops[0], True))
            else:
                out.append(_Draft(a, StatementKind.CONDITIONAL, [], UNKNOWN_TARGET))
        elif cls is InsnClass.CALL:
            out.append(self.call(ins))
        elif cls is InsnClass.RETURN:
            out.append(_Draft(a, StatementKind.JUMP, [SP], STACK_TARGET))
        elif cls is InsnClass.HALT:
            out.append(_Draft(a, StatementKind.HALT, []))
        elif cls is InsnClass.LOCK:
            if not out:
                out.append(_Draft(a, StatementKind.LOCK, []))
        else:
            out.append(_Draft(a, StatementKind.UNKNOWN, [_raw(o) for o in ops]))
        return out


def _finalize(draft: _Draft, index: int, sketch: tuple) -> MailStatement:
    s = MailStatement(index, draft.address, draft.kind, MailPattern.NOTDEFINED, sketch, draft.target)
    pattern = assign_pattern(s)
    if not pattern.is_constant and s.has_immediate():
        # Immediates only survive in constant-bearing patterns.
        sketch = tuple(e for e in sketch if e[0] != "imm")
    return replace(s, pattern=pattern, operand_sketch=sketch)


def statement_leaders(
    statements: tuple[MailStatement, ...] | list,
    starts: set[int] | frozenset[int] = frozenset(),
) -> list[int]:
    """Indices of statements that begin a straight-line region.

    ``starts`` are addresses (entry points, function starts) that always lead.
    Branch targets that fall between statements resolve to the next statement
    at or after the target address.
    """
    if not statements:
        return []
    addrs = [s.origin_address for s in statements]
    leaders = {0}

    def at(addr: int) -> int | None:
        i = bisect.bisect_left(addrs, addr)
        return i if i < len(addrs) else None

    for a in starts:
        i = at(a)
        if i is not None:
            leaders.add(i)
    for i, s in enumerate(statements):
        if s.ends_block() and i + 1 < len(statements):
            leaders.add(i + 1)
        if s.kind in (StatementKind.JUMP, StatementKind.CONDITIONAL) and isinstance(s.target, int):
            j = at(s.target)
            if j is not None:
                leaders.add(j)
    return sorted(leaders)


def _slot_sketch(raw: list, slots: dict[str, int], arch: Arch) -> tuple:
    def token(reg):
        if reg is None:
            return None
        fam = register_family(reg, arch) or reg
        if fam in SPECIAL_FAMILIES:
            return {"SP": "sp", "IP": "pc", "PC": "pc", "LR": "lr", "FLAGS": "flags"}[fam]
        if fam not in slots:
            slots[fam] = len(slots)
        return f"r{slots[fam]}"

    out = []
    for e in raw:
        tag = e[0]
        if tag == "reg":
            tok = token(e[1])
            out.append((tok,) if tok in ("sp", "pc", "lr", "flags") else ("r", int(tok[1:])))
        elif tag == "mem":
            out.append(("mem", token(e[1]), token(e[2]), e[3], e[4]))
        else:
            out.append(tuple(e))
    return tuple(out)


def translate(p: AsmProgram, libs: frozenset[str] | None = None) -> MailProgram:
    """Lift a normalized program to MAIL.  Total: unknown input maps to UNKNOWN."""
    tr = _Translator(p, default_library_symbols() if libs is None else libs)
    drafts: list[_Draft] = []
    for ins in p.instructions:
        drafts.extend(tr.instruction(ins))

    # First pass fixes kinds/targets so region boundaries are known; the
    # second numbers register slots per region.
    provisional = [_finalize(d, i, ()) for i, d in enumerate(drafts)]
    starts = set(p.entry_points)
    if p.function_bounds:
        starts.update(s for s, _ in p.function_bounds)
    leaders = statement_leaders(provisional, starts) + [len(drafts)]

    statements: list[MailStatement] = []
    for lo, hi in zip(leaders, leaders[1:]):
        slots: dict[str, int] = {}
        for i in range(lo, hi):
            statements.append(_finalize(drafts[i], i, _slot_sketch(drafts[i].sketch, slots, p.arch)))

    program = MailProgram(
        tuple(statements),
        p.entry_points,
        Provenance(p.name, p.arch),
        p.function_bounds,
        p.labels,
    )
    program.validate()
    return program


# --- dump format -------------------------------------------------------------

def _hex(v: int) -> str:
    return f"-0x{-v:x}" if v < 0 else f"0x{v:x}"


def format_element(e: tuple) -> str:
    tag = e[0]
    if tag == "r":
        return f"r{e[1]}"
    if tag == "imm":
        return "#" + _hex(e[1])
    if tag == "sym":
        return "@" + e[1]
    if tag == "mem":
        _, base, index, scale, disp = e
        parts = []
        if base:
            parts.append(base)
        if index:
            parts.append(index + (f"*{scale}" if scale != 1 else ""))
        text = "+".join(parts)
        if disp is not None:
            text += _hex(disp) if disp < 0 or not text else "+" + _hex(disp)
        return "[" + text + "]"
    return tag


def format_statement(s: MailStatement) -> str:
    sketch = ",".join(format_element(e) for e in s.operand_sketch) or "-"
    return f"{s.origin_address:08x} {s.pattern.value} {s.kind.value} {sketch}"


def dump_mail(m: MailProgram) -> str:
    return "".join(format_statement(s) + "\n" for s in m.statements)
