"""Listing ingestion and normalization for x86 and ARM assembly.

A listing is line oriented::

    # comment
    main:
    0: PUSH EBP
    1: MOV EBP, ESP
    3: CALL 0x40

Instruction lines match ``^([0-9a-fA-F]+):\\s+(\\w+)(\\s+.*)?$``, function
labels match ``^\\w+:$`` and whole-line comments start with ``#``.  Operands
are comma separated; see ``docs/listing-format.md`` for the operand grammar.
"""

from __future__ import annotations

import bisect
import enum
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

INSN_RE = re.compile(r"^([0-9a-fA-F]+):\s+(\w+)(\s+.*)?$")
LABEL_RE = re.compile(r"^\w+:$")
ARCH_HINT_RE = re.compile(r"^#\s*arch\s*:\s*(\w+)\s*$", re.IGNORECASE)
FAMILY_HINT_RE = re.compile(r"^#\s*family\s*:\s*(\S+)\s*$", re.IGNORECASE)


class ListingError(Exception):
    pass


class MalformedLine(ListingError):
    def __init__(self, line: int, text: str, reason: str = "unparseable syntax"):
        super().__init__(f"line {line}: {reason}: {text!r}")
        self.line = line
        self.text = text
        self.reason = reason


class DuplicateAddress(ListingError):
    def __init__(self, address: int, line: int):
        super().__init__(f"line {line}: duplicate address 0x{address:x}")
        self.address = address
        self.line = line


class EmptyProgram(ListingError):
    def __init__(self, msg: str = "EmptyProgram: listing contains no instructions"):
        super().__init__(msg)


class Arch(str, enum.Enum):
    X86 = "x86"
    ARM = "arm"

    @classmethod
    def coerce(cls, value: "Arch | str") -> "Arch":
        if isinstance(value, Arch):
            return value
        return cls(str(value).strip().lower())


class OperandKind(str, enum.Enum):
    REGISTER = "Register"
    IMMEDIATE = "Immediate"
    MEMORY = "MemoryRef"
    LABEL = "Label"


@dataclass(frozen=True)
class MemRef:
    base: str | None = None
    index: str | None = None
    scale: int = 1
    disp: int | None = None

    def __post_init__(self):
        if self.base is None and self.index is None and self.disp is None:
            raise ValueError("memory reference needs a base, index or displacement")


@dataclass(frozen=True)
class Operand:
    kind: OperandKind
    value: str | int | MemRef

    @classmethod
    def reg(cls, name: str) -> "Operand":
        return cls(OperandKind.REGISTER, name)

    @classmethod
    def imm(cls, value: int) -> "Operand":
        return cls(OperandKind.IMMEDIATE, value)

    @classmethod
    def mem(cls, base=None, index=None, scale=1, disp=None) -> "Operand":
        return cls(OperandKind.MEMORY, MemRef(base, index, scale, disp))

    @classmethod
    def label(cls, name: str) -> "Operand":
        return cls(OperandKind.LABEL, name)

    def registers(self) -> tuple[str, ...]:
        if self.kind is OperandKind.REGISTER:
            return (self.value,)
        if self.kind is OperandKind.MEMORY:
            return tuple(r for r in (self.value.base, self.value.index) if r)
        return ()


class InsnClass(str, enum.Enum):
    MOVE = "move"
    ARITH = "arith"
    LOGIC = "logic"
    COMPARE = "compare"
    PUSH = "push"
    POP = "pop"
    PUSH_ALL = "push_all"
    POP_ALL = "pop_all"
    LEAVE = "leave"
    FLAG = "flag"
    FLAG_PUSH = "flag_push"
    FLAG_POP = "flag_pop"
    JUMP = "jump"
    COND_JUMP = "cond_jump"
    CALL = "call"
    RETURN = "return"
    HALT = "halt"
    LOCK = "lock"
    NOP = "nop"
    PREFETCH = "prefetch"
    UNKNOWN = "unknown"


CONTROL_CLASSES = frozenset(
    {InsnClass.JUMP, InsnClass.COND_JUMP, InsnClass.CALL, InsnClass.RETURN}
)

# --- x86 ---------------------------------------------------------------------

_X86_CC = ["O", "NO", "B", "NAE", "C", "NB", "AE", "NC", "E", "Z", "NE", "NZ",
           "BE", "NA", "A", "NBE", "S", "NS", "P", "PE", "NP", "PO", "L", "NGE",
           "GE", "NL", "LE", "NG", "G", "NLE"]

X86_MNEMONICS: dict[str, InsnClass] = {
    **{m: InsnClass.MOVE for m in (
        "MOV", "MOVZX", "MOVSX", "MOVSXD", "LEA", "XCHG", "BSWAP", "CBW", "CWDE",
        "CDQ", "CDQE", "MOVSB", "MOVSW", "MOVSD", "STOSB", "STOSD", "LODSB",
        "LODSD")},
    **{m: InsnClass.ARITH for m in (
        "ADD", "SUB", "ADC", "SBB", "INC", "DEC", "NEG", "MUL", "IMUL", "DIV",
        "IDIV")},
    **{m: InsnClass.LOGIC for m in (
        "AND", "OR", "XOR", "NOT", "SHL", "SHR", "SAL", "SAR", "ROL", "ROR",
        "RCL", "RCR")},
    **{m: InsnClass.COMPARE for m in ("CMP", "TEST", "BT", "SCASB", "CMPSB")},
    "PUSH": InsnClass.PUSH,
    "POP": InsnClass.POP,
    "PUSHA": InsnClass.PUSH_ALL,
    "PUSHAD": InsnClass.PUSH_ALL,
    "POPA": InsnClass.POP_ALL,
    "POPAD": InsnClass.POP_ALL,
    "LEAVE": InsnClass.LEAVE,
    **{m: InsnClass.FLAG for m in (
        "CLC", "STC", "CMC", "CLD", "STD", "CLI", "STI", "LAHF", "SAHF")},
    "PUSHF": InsnClass.FLAG_PUSH,
    "PUSHFD": InsnClass.FLAG_PUSH,
    "POPF": InsnClass.FLAG_POP,
    "POPFD": InsnClass.FLAG_POP,
    "JMP": InsnClass.JUMP,
    **{"J" + cc: InsnClass.COND_JUMP for cc in _X86_CC},
    "JCXZ": InsnClass.COND_JUMP,
    "JECXZ": InsnClass.COND_JUMP,
    "LOOP": InsnClass.COND_JUMP,
    "LOOPE": InsnClass.COND_JUMP,
    "LOOPNE": InsnClass.COND_JUMP,
    **{"CMOV" + cc: InsnClass.MOVE for cc in _X86_CC},
    **{"SET" + cc: InsnClass.MOVE for cc in _X86_CC},
    "CALL": InsnClass.CALL,
    "RET": InsnClass.RETURN,
    "RETN": InsnClass.RETURN,
    "RETF": InsnClass.RETURN,
    "IRET": InsnClass.RETURN,
    "HLT": InsnClass.HALT,
    "LOCK": InsnClass.LOCK,
    "NOP": InsnClass.NOP,
    "PAUSE": InsnClass.NOP,
    "FNOP": InsnClass.NOP,
    **{m: InsnClass.PREFETCH for m in (
        "PREFETCH", "PREFETCHT0", "PREFETCHT1", "PREFETCHT2", "PREFETCHNTA",
        "PREFETCHW")},
}

# LOCK survives normalization (it has its own pattern); the rest are dropped.
X86_PREFIXES = frozenset({
    "LOCK", "REP", "REPE", "REPZ", "REPNE", "REPNZ", "CS", "DS", "ES", "FS",
    "GS", "SS", "DATA16", "ADDR32", "BND", "NOTRACK", "XACQUIRE", "XRELEASE",
})
KEPT_PREFIXES = frozenset({"LOCK"})

_X86_FAMILIES = {
    "A": ("RAX", "EAX", "AX", "AH", "AL"),
    "B": ("RBX", "EBX", "BX", "BH", "BL"),
    "C": ("RCX", "ECX", "CX", "CH", "CL"),
    "D": ("RDX", "EDX", "DX", "DH", "DL"),
    "SI": ("RSI", "ESI", "SI", "SIL"),
    "DI": ("RDI", "EDI", "DI", "DIL"),
    "BP": ("RBP", "EBP", "BP", "BPL"),
    "SP": ("RSP", "ESP", "SP", "SPL"),
    "IP": ("RIP", "EIP", "IP"),
    "FLAGS": ("EFLAGS", "RFLAGS"),
    **{f"R{n}": (f"R{n}", f"R{n}D", f"R{n}W", f"R{n}B") for n in range(8, 16)},
    **{seg: (seg,) for seg in ("CS", "DS", "ES", "FS", "GS", "SS")},
    **{f"XMM{n}": (f"XMM{n}",) for n in range(16)},
}
X86_REGISTERS: dict[str, str] = {
    name: fam for fam, names in _X86_FAMILIES.items() for name in names
}

# --- ARM ---------------------------------------------------------------------

_ARM_CC = ("EQ", "NE", "CS", "HS", "CC", "LO", "MI", "PL", "VS", "VC", "HI",
           "LS", "GE", "LT", "GT", "LE", "AL")

ARM_MNEMONICS: dict[str, InsnClass] = {
    **{m: InsnClass.MOVE for m in (
        "MOV", "MVN", "MOVW", "MOVT", "LDR", "LDRB", "LDRH", "LDRSB", "LDRSH",
        "LDRD", "STR", "STRB", "STRH", "STRD", "ADR", "LDREX", "STREX", "UXTB",
        "UXTH", "SXTB", "SXTH")},
    **{m: InsnClass.ARITH for m in (
        "ADD", "ADC", "SUB", "SBC", "RSB", "RSC", "MUL", "MLA", "MLS", "UMULL",
        "SMULL", "SDIV", "UDIV")},
    **{m: InsnClass.LOGIC for m in (
        "AND", "ORR", "EOR", "BIC", "LSL", "LSR", "ASR", "ROR")},
    **{m: InsnClass.COMPARE for m in ("CMP", "CMN", "TST", "TEQ")},
    "PUSH": InsnClass.PUSH_ALL,
    "POP": InsnClass.POP_ALL,
    **{m: InsnClass.PUSH_ALL for m in ("STMDB", "STMFD")},
    **{m: InsnClass.POP_ALL for m in ("LDMIA", "LDMFD", "LDM")},
    **{m: InsnClass.FLAG for m in ("MRS", "MSR", "CPSID", "CPSIE")},
    "B": InsnClass.JUMP,
    "BX": InsnClass.JUMP,
    "BL": InsnClass.CALL,
    "BLX": InsnClass.CALL,
    "CBZ": InsnClass.COND_JUMP,
    "CBNZ": InsnClass.COND_JUMP,
    "WFI": InsnClass.HALT,
    "WFE": InsnClass.HALT,
    **{m: InsnClass.LOCK for m in ("DMB", "DSB", "ISB")},
    "NOP": InsnClass.NOP,
    "YIELD": InsnClass.NOP,
    **{m: InsnClass.PREFETCH for m in ("PRFM", "PLD", "PLDW", "PLI")},
}

# Mnemonics that accept the flag-setting S suffix.
_ARM_S_OK = frozenset(
    m for m, c in ARM_MNEMONICS.items()
    if c in (InsnClass.MOVE, InsnClass.ARITH, InsnClass.LOGIC)
    and not m.startswith(("LDR", "STR", "ADR"))
)

ARM_REGISTERS: dict[str, str] = {
    **{f"R{n}": f"R{n}" for n in range(13)},
    "R13": "SP", "SP": "SP",
    "R14": "LR", "LR": "LR",
    "R15": "PC", "PC": "PC",
    "FP": "R11", "IP": "R12", "SB": "R9", "SL": "R10",
    **{f: "FLAGS" for f in ("CPSR", "APSR", "SPSR", "APSR_NZCV", "APSR_NZCVQ",
                            "CPSR_C", "CPSR_F")},
}

# Registers never abstracted to slots and never renamed.
SPECIAL_FAMILIES = frozenset({"SP", "IP", "PC", "LR", "FLAGS"})


def register_family(name: str, arch: Arch) -> str | None:
    table = X86_REGISTERS if arch is Arch.X86 else ARM_REGISTERS
    return table.get(name.upper())


@lru_cache(maxsize=4096)
def decode_mnemonic(mnemonic: str, arch: Arch) -> tuple[InsnClass, str, str]:
    """Return ``(class, base mnemonic, condition code)`` for a mnemonic.

    ARM mnemonics may carry a condition suffix and/or an ``S`` suffix
    (``ADDSEQ``, ``ADDEQS``, ``BLNE``); x86 conditions are part of the table.
    """
    m = mnemonic.upper()
    if arch is Arch.X86:
        return X86_MNEMONICS.get(m, InsnClass.UNKNOWN), m, ""
    if m in ARM_MNEMONICS:
        return ARM_MNEMONICS[m], m, ""
    best = None
    for cut in range(len(m) - 1, 0, -1):
        base, rest = m[:cut], m[cut:]
        if base not in ARM_MNEMONICS:
            continue
        cond = None
        if rest in _ARM_CC:
            cond = rest
        elif base in _ARM_S_OK and rest == "S":
            cond = ""
        elif base in _ARM_S_OK and len(rest) == 3:
            if rest[0] == "S" and rest[1:] in _ARM_CC:
                cond = rest[1:]
            elif rest[2] == "S" and rest[:2] in _ARM_CC:
                cond = rest[:2]
        if cond is not None:
            best = (ARM_MNEMONICS[base], base, "" if cond == "AL" else cond)
            break
    return best or (InsnClass.UNKNOWN, m, "")


@dataclass(frozen=True)
class AsmInstruction:
    address: int
    mnemonic: str
    operands: tuple[Operand, ...]
    arch: Arch
    raw_text: str = field(default="", compare=False)
    prefixes: tuple[str, ...] = ()
    line: int = field(default=0, compare=False)

    @property
    def decoded(self) -> tuple[InsnClass, str, str]:
        return decode_mnemonic(self.mnemonic, self.arch)

    @property
    def insn_class(self) -> InsnClass:
        return self.decoded[0]

    @property
    def condition(self) -> str:
        return self.decoded[2]

    def is_control_transfer(self) -> bool:
        cls, _, cond = self.decoded
        if cls in CONTROL_CLASSES:
            return True
        # ARM data-processing / load instructions writing PC are branches.
        return (
            self.arch is Arch.ARM
            and cls in (InsnClass.MOVE, InsnClass.ARITH, InsnClass.LOGIC, InsnClass.POP_ALL)
            and any(
                o.kind is OperandKind.REGISTER and register_family(o.value, self.arch) == "PC"
                for o in (self.operands if cls is InsnClass.POP_ALL else self.operands[:1])
            )
        )

    def __str__(self) -> str:
        return f"{self.address:x}: {format_instruction_body(self)}"


@dataclass(frozen=True)
class AsmProgram:
    instructions: tuple[AsmInstruction, ...]
    arch: Arch
    entry_points: frozenset[int]
    function_bounds: tuple[tuple[int, int], ...] | None = None
    labels: tuple[tuple[str, int], ...] = ()
    name: str = field(default="", compare=False)

    def __len__(self) -> int:
        return len(self.instructions)

    def label_map(self) -> dict[str, int]:
        return dict(self.labels)

    def addresses(self) -> list[int]:
        return [i.address for i in self.instructions]


# --- operand parsing ---------------------------------------------------------

_SIZE_RE = re.compile(
    r"\b(?:BYTE|WORD|DWORD|QWORD|TBYTE|XMMWORD|YMMWORD)\s+PTR\s+|\b(?:SHORT|NEAR|FAR)\s+",
    re.IGNORECASE,
)
_SEG_RE = re.compile(r"^(?:[CDEFGS]S)\s*:\s*(?=\[)", re.IGNORECASE)
_NUM_RE = re.compile(r"^#?\s*([+-]?)\s*(0x[0-9a-fA-F]+|[0-9]+)$")
_SYM_RE = re.compile(r"^<?([A-Za-z_.$@][\w.$@]*(?:[+-](?:0x[0-9a-fA-F]+|[0-9]+))?)>?$")
_SHIFT_RE = re.compile(r"^(LSL|LSR|ASR|ROR)\s+(.+)$", re.IGNORECASE)


class _OperandError(ValueError):
    pass


def _parse_int(text: str) -> int | None:
    m = _NUM_RE.match(text.strip())
    if not m:
        return None
    value = int(m.group(2), 0)
    return -value if m.group(1) == "-" else value


def _split_top(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
            if depth < 0:
                raise _OperandError("unbalanced bracket")
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if depth != 0:
        raise _OperandError("unbalanced bracket")
    parts.append("".join(cur).strip())
    if any(not p for p in parts):
        raise _OperandError("empty operand")
    return parts


def _canon_reg(text: str, arch: Arch) -> str | None:
    name = text.strip().upper().rstrip("!")
    return name if register_family(name, arch) else None


def _parse_mem_x86(inner: str) -> MemRef:
    terms = re.findall(r"([+-]?)\s*([^+-]+)", inner.replace(" ", ""))
    if not terms or "".join(s + t for s, t in terms) != inner.replace(" ", ""):
        raise _OperandError("bad memory expression")
    base = index = None
    scale, disp = 1, None
    for sign, term in terms:
        if "*" in term:
            a, b = term.split("*", 1)
            reg, num = (a, b) if _canon_reg(a, Arch.X86) else (b, a)
            if not _canon_reg(reg, Arch.X86) or _parse_int(num) is None or sign == "-":
                raise _OperandError("bad scaled index")
            index, scale = reg.upper(), _parse_int(num)
            continue
        reg = _canon_reg(term, Arch.X86)
        if reg:
            if sign == "-":
                raise _OperandError("negative register term")
            if base is None:
                base = reg
            elif index is None:
                index = reg
            else:
                raise _OperandError("too many registers")
            continue
        num = _parse_int(term)
        if num is None:
            raise _OperandError(f"bad memory term {term!r}")
        disp = (disp or 0) + (-num if sign == "-" else num)
    return MemRef(base, index, scale, disp)


def _parse_mem_arm(inner: str) -> MemRef:
    parts = [p.strip() for p in inner.split(",")]
    base = _canon_reg(parts[0], Arch.ARM)
    if base is None:
        num = _parse_int(parts[0])
        if num is None or len(parts) > 1:
            raise _OperandError("bad ARM base")
        return MemRef(disp=num)
    index, scale, disp = None, 1, None
    for part in parts[1:]:
        shift = _SHIFT_RE.match(part)
        if shift and index is not None:
            amount = _parse_int(shift.group(2))
            if amount is None:
                raise _OperandError("bad shift")
            scale = 1 << amount if shift.group(1).upper() == "LSL" else 1
            continue
        reg = _canon_reg(part.lstrip("+-"), Arch.ARM)
        if reg and index is None:
            index = reg
            continue
        num = _parse_int(part)
        if num is None or disp is not None:
            raise _OperandError(f"bad ARM memory term {part!r}")
        disp = num
    return MemRef(base, index, scale, disp)


def _expand_reglist(text: str) -> list[Operand]:
    out = []
    for item in (p.strip() for p in text.split(",")):
        if "-" in item:
            lo, hi = (s.strip().upper() for s in item.split("-", 1))
            if not (lo.startswith("R") and hi.startswith("R")):
                raise _OperandError("bad register range")
            try:
                a, b = int(lo[1:]), int(hi[1:])
            except ValueError:
                raise _OperandError("bad register range") from None
            if a > b or b > 15:
                raise _OperandError("bad register range")
            out.extend(Operand.reg(_canon_reg(f"R{n}", Arch.ARM)) for n in range(a, b + 1))
            continue
        reg = _canon_reg(item, Arch.ARM)
        if reg is None:
            raise _OperandError(f"bad register {item!r}")
        out.append(Operand.reg(reg))
    return out


def parse_operand(text: str, arch: Arch) -> list[Operand]:
    """Parse one top-level operand; ARM register lists expand to several."""
    text = _SIZE_RE.sub("", text).strip()
    text = _SEG_RE.sub("", text)
    if arch is Arch.ARM and text.startswith("{"):
        if not text.endswith("}") and not text.endswith("}^"):
            raise _OperandError("bad register list")
        return _expand_reglist(text[1:text.rindex("}")])
    if text.startswith("["):
        end = text.rfind("]")
        if end < 0 or text[end + 1:] not in ("", "!"):
            raise _OperandError("bad memory operand")
        inner = text[1:end].strip()
        if not inner:
            raise _OperandError("empty memory operand")
        parse = _parse_mem_x86 if arch is Arch.X86 else _parse_mem_arm
        return [Operand(OperandKind.MEMORY, parse(inner))]
    if arch is Arch.ARM:
        shift = _SHIFT_RE.match(text)
        if shift:
            return parse_operand(shift.group(2), arch)
    reg = _canon_reg(text, arch)
    if reg:
        return [Operand.reg(reg)]
    num = _parse_int(text)
    if num is not None:
        return [Operand.imm(num)]
    sym = _SYM_RE.match(text)
    if sym:
        return [Operand.label(sym.group(1))]
    raise _OperandError(f"cannot parse operand {text!r}")


def parse_operands(text: str, arch: Arch) -> tuple[Operand, ...]:
    text = text.strip()
    if not text:
        return ()
    ops: list[Operand] = []
    for part in _split_top(text):
        ops.extend(parse_operand(part, arch))
    return tuple(ops)


def _split_prefixes(mnemonic: str, rest: str, arch: Arch) -> tuple[tuple[str, ...], str, str]:
    prefixes: list[str] = []
    if arch is not Arch.X86:
        return (), mnemonic, rest
    while mnemonic.upper() in X86_PREFIXES:
        m = re.match(r"^(\w+)(\s+.*)?$", rest.strip())
        if not m or register_family(m.group(1), arch) or _parse_int(m.group(1)) is not None:
            break
        prefixes.append(mnemonic.upper())
        mnemonic, rest = m.group(1), m.group(2) or ""
    return tuple(prefixes), mnemonic, rest


def parse_listing(text: str, arch: Arch | str, name: str = "") -> AsmProgram:
    """Parse a textual listing into an address-ordered :class:`AsmProgram`."""
    arch = Arch.coerce(arch)
    instructions: list[AsmInstruction] = []
    labels: list[tuple[str, int]] = []
    pending: list[tuple[str, int]] = []
    seen: dict[int, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = INSN_RE.match(line)
        if m:
            address = int(m.group(1), 16)
            if address in seen:
                raise DuplicateAddress(address, lineno)
            seen[address] = lineno
            prefixes, mnemonic, rest = _split_prefixes(m.group(2), m.group(3) or "", arch)
            try:
                operands = parse_operands(rest, arch)
            except _OperandError as exc:
                raise MalformedLine(lineno, raw, str(exc)) from None
            instructions.append(AsmInstruction(
                address, mnemonic.upper(), operands, arch, raw, prefixes, lineno))
            labels.extend((lbl, address) for lbl, _ in pending)
            pending.clear()
            continue
        if LABEL_RE.match(line):
            pending.append((line[:-1], lineno))
            continue
        raise MalformedLine(lineno, raw)

    if pending:
        lbl, lineno = pending[0]
        raise MalformedLine(lineno, lbl + ":", "label not followed by an instruction")
    if not instructions:
        raise EmptyProgram()

    instructions.sort(key=lambda i: i.address)
    first = instructions[0].address
    entries = frozenset({first} | {addr for _, addr in labels})
    bounds = None
    if labels:
        starts = sorted(entries)
        ends = starts[1:] + [instructions[-1].address + 1]
        bounds = tuple(zip(starts, ends))
    return AsmProgram(tuple(instructions), arch, entries, bounds, tuple(labels), name)


def sniff_arch(text: str, default: Arch | str | None = None) -> Arch:
    """Read a ``# arch: <x86|arm>`` comment, falling back to ``default``."""
    for line in text.splitlines():
        m = ARCH_HINT_RE.match(line.strip())
        if m:
            return Arch.coerce(m.group(1))
    if default is None:
        raise ValueError("no '# arch:' hint in listing and no default architecture")
    return Arch.coerce(default)


def sniff_family(text: str) -> str | None:
    for line in text.splitlines():
        m = FAMILY_HINT_RE.match(line.strip())
        if m:
            return m.group(1)
    return None


# --- normalization -----------------------------------------------------------

@dataclass(frozen=True)
class JunkRule:
    arch: Arch
    mnemonic: str
    self_only: bool = False

    def matches(self, ins: AsmInstruction) -> bool:
        if ins.arch is not self.arch or ins.mnemonic != self.mnemonic:
            return False
        if not self.self_only:
            return True
        if len(ins.operands) < 2:
            return False
        for op in ins.operands:
            if op.kind in (OperandKind.IMMEDIATE, OperandKind.LABEL):
                return False
            if op.kind is OperandKind.MEMORY and (op.value.index or op.value.disp):
                return False
        names = {r for op in ins.operands for r in op.registers()}
        return len(names) == 1


def load_junk_table(text: str | None = None) -> tuple[JunkRule, ...]:
    """Load junk rules; ``None`` loads the table shipped with the package."""
    if text is None:
        text = resources.files("mailscan").joinpath("data/junk.cfg").read_text()
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "self"):
            raise ValueError(f"junk table line {lineno}: expected '<arch> <MNEMONIC> [self]'")
        arch = Arch.coerce(parts[0])
        mnemonic = parts[1].upper()
        if decode_mnemonic(mnemonic, arch)[0] in CONTROL_CLASSES:
            raise ValueError(f"junk table line {lineno}: {mnemonic} is a control transfer")
        rules.append(JunkRule(arch, mnemonic, len(parts) == 3))
    return tuple(rules)


@lru_cache(maxsize=1)
def default_junk_table() -> tuple[JunkRule, ...]:
    return load_junk_table()


def is_removable(ins: AsmInstruction, junk: tuple[JunkRule, ...] | None = None) -> bool:
    if ins.is_control_transfer():
        return False
    if ins.insn_class in (InsnClass.NOP, InsnClass.PREFETCH):
        return True
    return any(rule.matches(ins) for rule in (default_junk_table() if junk is None else junk))


def _next_surviving(addresses: list[int], addr: int) -> int | None:
    i = bisect.bisect_left(addresses, addr)
    return addresses[i] if i < len(addresses) else None


def normalize(p: AsmProgram, junk: tuple[JunkRule, ...] | None = None) -> AsmProgram:
    """Drop NOPs, junk and non-LOCK prefixes; addresses are preserved.

    Entry points and labels that sat on a removed instruction move to the
    next surviving one.
    """
    kept = []
    for ins in p.instructions:
        if is_removable(ins, junk):
            continue
        prefixes = tuple(x for x in ins.prefixes if x in KEPT_PREFIXES)
        kept.append(ins if prefixes == ins.prefixes else replace(ins, prefixes=prefixes))
    addrs = [i.address for i in kept]
    entries = frozenset(
        a for a in (_next_surviving(addrs, e) for e in p.entry_points) if a is not None
    )
    labels = tuple(
        (name, a) for name, a in ((n, _next_surviving(addrs, x)) for n, x in p.labels)
        if a is not None
    )
    return AsmProgram(tuple(kept), p.arch, entries, p.function_bounds, labels, p.name)


# --- listing writer ----------------------------------------------------------

def _fmt_int(value: int, arch: Arch, hash_prefix: bool = True) -> str:
    text = f"-0x{-value:x}" if value < 0 else f"0x{value:x}"
    return ("#" + text) if arch is Arch.ARM and hash_prefix else text


def format_operand(op: Operand, arch: Arch) -> str:
    if op.kind is OperandKind.REGISTER or op.kind is OperandKind.LABEL:
        return str(op.value)
    if op.kind is OperandKind.IMMEDIATE:
        return _fmt_int(op.value, arch)
    mem: MemRef = op.value
    if arch is Arch.ARM:
        if mem.base is None:
            return f"[{_fmt_int(mem.disp, arch, False)}]"
        parts = [mem.base]
        if mem.index:
            parts.append(mem.index)
            if mem.scale > 1:
                parts.append(f"LSL #{mem.scale.bit_length() - 1}")
        if mem.disp is not None:
            parts.append(_fmt_int(mem.disp, arch))
        return "[" + ", ".join(parts) + "]"
    text = ""
    if mem.base:
        text = mem.base
    if mem.index:
        idx = mem.index + (f"*{mem.scale}" if mem.scale != 1 else "")
        text = f"{text} + {idx}" if text else idx
    if mem.disp is not None:
        if not text:
            text = _fmt_int(mem.disp, arch)
        elif mem.disp < 0:
            text += f" - 0x{-mem.disp:x}"
        else:
            text += f" + 0x{mem.disp:x}"
    return f"[{text}]"


def format_instruction_body(ins: AsmInstruction) -> str:
    ops = list(ins.operands)
    cls, base, _ = ins.decoded
    if ins.arch is Arch.ARM and cls in (InsnClass.PUSH_ALL, InsnClass.POP_ALL) and ops:
        if base in ("PUSH", "POP"):
            text = "{" + ", ".join(format_operand(o, ins.arch) for o in ops) + "}"
        else:
            head = format_operand(ops[0], ins.arch)
            if head == "SP":
                head += "!"
            text = head + ", {" + ", ".join(format_operand(o, ins.arch) for o in ops[1:]) + "}"
    else:
        text = ", ".join(format_operand(o, ins.arch) for o in ops)
    words = list(ins.prefixes) + [ins.mnemonic]
    return " ".join(words) + (" " + text if text else "")


def format_listing(p: AsmProgram, header: bool = True) -> str:
    """Serialize a program back to the listing grammar."""
    by_addr: dict[int, list[str]] = {}
    for name, addr in p.labels:
        by_addr.setdefault(addr, []).append(name)
    lines = [f"# arch: {p.arch.value}"] if header else []
    for ins in p.instructions:
        lines.extend(f"{name}:" for name in by_addr.get(ins.address, ()))
        lines.append(f"{ins.address:x}: {format_instruction_body(ins)}")
    return "\n".join(lines) + "\n"
