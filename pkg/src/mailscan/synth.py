"""Seeded generator of structured x86/ARM listings for experiments and tests.

Programs are built from functions made of straight-line runs, if/else
diamonds, counted loops, local calls and library calls.  Every program
terminates: loops are counted and local calls only go to later functions.
Instructions sit four bytes apart so mutators can slot code into the gaps.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

from .asmfront import Arch

STEP = 4
BASE = 0x1000

X86_GPR = ("EAX", "EBX", "ECX", "EDX", "ESI", "EDI")
ARM_GPR = tuple(f"R{i}" for i in range(11))
X86_JCC = ("JE", "JNE", "JL", "JG", "JLE", "JGE")
ARM_COND = ("EQ", "NE", "LT", "GT", "LE", "GE")
LIBS = (
    "strcpy", "strlen", "memcpy", "memset", "malloc", "free", "socket", "connect",
    "send", "recv", "open", "read", "write", "close", "fopen", "fread", "printf",
    "sprintf", "getenv", "system", "ptrace", "mmap", "mprotect", "time", "rand",
)


@dataclass(frozen=True)
class Style:
    """Per-program construct and opcode preferences."""

    constructs: dict[str, float]
    ops: dict[str, float]
    libs: tuple[str, ...]
    functions: tuple[int, int]
    body: tuple[int, int]


def _style(rng: random.Random, benign: bool) -> Style:
    # The two classes come from different priors: benign code leans on
    # library calls, memory traffic and register moves, malware on
    # immediates and bit twiddling.
    mal, ben = (0.0, 1.0) if benign else (1.0, 0.0)
    constructs = {
        "straight": rng.uniform(1, 3),
        "if": rng.uniform(0.3, 1.5),
        "ifelse": rng.uniform(0.3, 1.5),
        "loop": rng.uniform(0.2, 1.0),
        "call": rng.uniform(0.2, 1.0),
        "lib": rng.uniform(0.2, 1.0) * (1 + 1.5 * ben),
    }
    ops = {
        "mov_imm": rng.uniform(0.5, 2) * (0.4 + mal),
        "mov_reg": rng.uniform(0.5, 2) * (0.6 + ben),
        "arith_imm": rng.uniform(0.3, 1.5) * (0.4 + mal),
        "arith_reg": rng.uniform(0.3, 1.5),
        "logic": rng.uniform(0.1, 1.0) * (0.3 + 1.2 * mal),
        "load": rng.uniform(0.3, 1.5) * (0.6 + ben),
        "store": rng.uniform(0.3, 1.5) * (0.6 + ben),
        "lea": rng.uniform(0.1, 0.8),
    }
    libs = tuple(rng.sample(LIBS, rng.randint(3, 7)))
    functions = (4, 9) if benign else (3, 7)
    return Style(constructs, ops, libs, functions, (2, 5))


def _pick(rng: random.Random, weights: dict[str, float]) -> str:
    keys = sorted(weights)
    return rng.choices(keys, [weights[k] for k in keys])[0]


@dataclass
class _Unit:
    """Pending code: (label or None, mnemonic, operand text with ``@name`` targets)."""

    rows: list[tuple[str | None, str, str]] = field(default_factory=list)
    counter: int = 0

    def fresh(self, stem: str) -> str:
        self.counter += 1
        return f"{stem}_{self.counter}"

    def emit(self, mnemonic: str, operands: str = "", label: str | None = None) -> None:
        self.rows.append((label, mnemonic, operands))


class _Gen:
    def __init__(self, rng: random.Random, arch: Arch, style: Style):
        self.rng, self.arch, self.style = rng, arch, style
        self.u = _Unit()
        self.pending_label: str | None = None
        self.alias: dict[str, str] = {}
        self.reserved: set[str] = set()

    # Emission with a label waiting for the next instruction.
    def emit(self, mnemonic: str, operands: str = "") -> None:
        self.u.emit(mnemonic, operands, self.pending_label)
        self.pending_label = None

    def place(self, label: str) -> None:
        if self.pending_label is not None:
            self.alias[label] = self.pending_label
        else:
            self.pending_label = label

    def reg(self) -> str:
        pool = X86_GPR if self.arch is Arch.X86 else ARM_GPR[:8]
        return self.rng.choice([r for r in pool if r not in self.reserved])

    def imm(self) -> str:
        v = self.rng.choice((0, 1, 2, 4, 8, 0x10, 0x20, 0xFF, self.rng.randint(1, 0x400)))
        return f"#0x{v:x}" if self.arch is Arch.ARM else f"0x{v:x}"

    # --- straight-line code ---------------------------------------------------
    def op(self) -> None:
        kind = _pick(self.rng, self.style.ops)
        r, s = self.reg(), self.reg()
        disp = self.rng.choice((4, 8, 0xC, 0x10, 0x14))
        if self.arch is Arch.X86:
            table = {
                "mov_imm": ("MOV", f"{r}, {self.imm()}"),
                "mov_reg": ("MOV", f"{r}, {s}"),
                "arith_imm": (self.rng.choice(("ADD", "SUB")), f"{r}, {self.imm()}"),
                "arith_reg": (self.rng.choice(("ADD", "SUB", "IMUL")), f"{r}, {s}"),
                "logic": (self.rng.choice(("XOR", "AND", "OR")), f"{r}, {s}"),
                "load": ("MOV", f"{r}, DWORD PTR [EBP - 0x{disp:x}]"),
                "store": ("MOV", f"DWORD PTR [EBP - 0x{disp:x}], {r}"),
                "lea": ("LEA", f"{r}, [{s} + 0x{disp:x}]"),
            }
        else:
            table = {
                "mov_imm": ("MOV", f"{r}, {self.imm()}"),
                "mov_reg": ("MOV", f"{r}, {s}"),
                "arith_imm": (self.rng.choice(("ADD", "SUB")), f"{r}, {r}, {self.imm()}"),
                "arith_reg": (self.rng.choice(("ADD", "SUB", "MUL")), f"{r}, {r}, {s}"),
                "logic": (self.rng.choice(("EOR", "AND", "ORR")), f"{r}, {r}, {s}"),
                "load": ("LDR", f"{r}, [R11, #-0x{disp + 4:x}]"),
                "store": ("STR", f"{r}, [R11, #-0x{disp + 4:x}]"),
                "lea": ("ADD", f"{r}, {s}, #0x{disp:x}"),
            }
        self.emit(*table[kind])

    def straight(self, n: int) -> None:
        for _ in range(n):
            self.op()

    def compare(self) -> str:
        r = self.reg()
        if self.rng.random() < 0.6:
            self.emit("CMP", f"{r}, {self.imm()}")
        else:
            self.emit("CMP", f"{r}, {self.reg()}")
        return self.rng.choice(X86_JCC if self.arch is Arch.X86 else ARM_COND)

    def branch(self, cond: str | None, label: str) -> None:
        if self.arch is Arch.X86:
            self.emit(cond or "JMP", f"@{label}")
        else:
            self.emit("B" + (cond or ""), f"@{label}")

    # --- constructs ------------------------------------------------------------
    def block(self, depth: int, fn_index: int, n_fns: int) -> None:
        lo, hi = self.style.body
        for _ in range(self.rng.randint(lo, hi)):
            self.construct(depth, fn_index, n_fns)

    def construct(self, depth: int, fn_index: int, n_fns: int) -> None:
        kind = _pick(self.rng, self.style.constructs)
        if depth >= 2 and kind in ("if", "ifelse", "loop"):
            kind = "straight"
        if kind == "call" and fn_index + 1 >= n_fns:
            kind = "lib"
        if kind == "straight":
            self.straight(self.rng.randint(1, 4))
        elif kind == "if":
            end = self.u.fresh("endif")
            cond = self.compare()
            self.branch(cond, end)
            self.straight(self.rng.randint(1, 3))
            if self.rng.random() < 0.5:
                self.block(depth + 1, fn_index, n_fns)
            self.place(end)
        elif kind == "ifelse":
            other, end = self.u.fresh("else"), self.u.fresh("endif")
            cond = self.compare()
            self.branch(cond, other)
            self.straight(self.rng.randint(1, 3))
            self.branch(None, end)
            self.place(other)
            self.straight(self.rng.randint(1, 3))
            if self.rng.random() < 0.4:
                self.block(depth + 1, fn_index, n_fns)
            self.place(end)
        elif kind == "loop":
            top = self.u.fresh("loop")
            ctr = self.rng.choice(("ECX", "ESI", "EDI") if self.arch is Arch.X86 else ("R8", "R9", "R10"))
            self.emit("MOV", f"{ctr}, {'#' if self.arch is Arch.ARM else ''}0x{self.rng.randint(2, 6):x}")
            self.place(top)
            self.reserved.add(ctr)
            self.straight(self.rng.randint(1, 3))
            self.reserved.discard(ctr)
            if self.arch is Arch.X86:
                self.emit("DEC", ctr)
                self.branch("JNE", top)
            else:
                self.emit("SUBS", f"{ctr}, {ctr}, #0x1")
                self.branch("NE", top)
        elif kind == "call":
            callee = self.rng.randint(fn_index + 1, n_fns - 1)
            self.emit("CALL" if self.arch is Arch.X86 else "BL", f"@fn_{callee}")
        else:
            lib = self.rng.choice(self.style.libs)
            if self.arch is Arch.X86:
                for _ in range(self.rng.randint(1, 2)):
                    self.emit("PUSH", self.reg())
                self.emit("CALL", lib)
                self.emit("ADD", "ESP, 0x8")
            else:
                self.emit("MOV", f"R0, {self.reg()}")
                self.emit("BL", lib)

    def function(self, index: int, n_fns: int) -> None:
        self.place(f"fn_{index}")
        if self.arch is Arch.X86:
            self.emit("PUSH", "EBP")
            self.emit("MOV", "EBP, ESP")
            # The frame always covers the deepest local slot.
            self.emit("SUB", f"ESP, 0x{self.rng.choice((0x18, 0x20, 0x40)):x}")
            self.block(0, index, n_fns)
            self.emit("MOV", f"EAX, {self.reg()}")
            self.emit("MOV", "ESP, EBP")
            self.emit("POP", "EBP")
            self.emit("RET")
        else:
            self.emit("PUSH", "{R4, R11, LR}")
            self.emit("ADD", "R11, SP, #0x4")
            self.emit("SUB", "SP, SP, #0x18")
            self.block(0, index, n_fns)
            self.emit("MOV", f"R0, {self.reg()}")
            self.emit("SUB", "SP, R11, #0x4")
            self.emit("POP", "{R4, R11, PC}")


def _assemble(rows: list[tuple[str | None, str, str]], header: list[str],
              alias: dict[str, str]) -> str:
    addr = {}
    for i, (label, _, _) in enumerate(rows):
        if label:
            addr[label] = BASE + STEP * i
    for label, same in alias.items():
        addr[label] = addr[same]
    lines = list(header)
    for i, (label, mnemonic, ops) in enumerate(rows):
        if label and label.startswith("fn_"):
            lines.append(f"{label}:")
        if ops.startswith("@"):
            target = addr[ops[1:]]
            ops = f"0x{target:x}"
        lines.append(f"{BASE + STEP * i:x}: {mnemonic}" + (f" {ops}" if ops else ""))
    return "\n".join(lines) + "\n"


def generate_program(seed: int, arch: Arch | str = Arch.X86, benign: bool = False,
                     family: str | None = None) -> str:
    """One deterministic listing.  ``benign`` draws from a different opcode and construct mix."""
    arch = Arch.coerce(arch)
    rng = random.Random(f"{'ben' if benign else 'mal'}:{arch.value}:{seed}")
    style = _style(rng, benign)
    gen = _Gen(rng, arch, style)
    n_fns = rng.randint(*style.functions)
    for i in range(n_fns):
        gen.function(i, n_fns)
    header = [f"# arch: {arch.value}"]
    if family:
        header.append(f"# family: {family}")
    return _assemble(gen.u.rows, header, gen.alias)


def generate_large(seed: int, instructions: int = 10_000, arch: Arch | str = Arch.X86) -> str:
    """A listing of roughly ``instructions`` lines built from many small functions."""
    arch = Arch.coerce(arch)
    rng = random.Random(f"large:{arch.value}:{seed}")
    style = _style(rng, benign=True)
    style = Style(style.constructs, style.ops, style.libs, style.functions, (3, 8))
    gen = _Gen(rng, arch, style)
    i = 0
    while len(gen.u.rows) < instructions:
        gen.function(i, i + 2)
        i += 1
    # Earlier functions may call the next one, so close with a leaf.
    gen.function(i, i + 1)
    return _assemble(gen.u.rows, [f"# arch: {arch.value}"], gen.alias)


def write_corpus(out: str | Path, n_malware: int = 30, n_benign: int = 20, seed: int = 0,
                 arm_every: int = 5) -> tuple[list[Path], list[Path]]:
    """Write ``malware/`` and ``benign/`` listings plus ``manifest.csv`` under ``out``.

    Every ``arm_every``-th program is ARM; the rest are x86.
    """
    out = Path(out)
    (out / "malware").mkdir(parents=True, exist_ok=True)
    (out / "benign").mkdir(parents=True, exist_ok=True)
    mal, ben = [], []
    for i in range(n_malware):
        arch = Arch.ARM if arm_every and i % arm_every == arm_every - 1 else Arch.X86
        fam = f"fam{i:02d}"
        path = out / "malware" / f"{fam}.lst"
        path.write_text(generate_program(seed * 1000 + i, arch, False, fam), encoding="utf-8")
        mal.append(path)
    for i in range(n_benign):
        arch = Arch.ARM if arm_every and i % arm_every == arm_every - 1 else Arch.X86
        path = out / "benign" / f"app{i:02d}.lst"
        path.write_text(generate_program(seed * 1000 + i, arch, True), encoding="utf-8")
        ben.append(path)
    rows = ["path,label,family,arch"]
    rows += [f"malware/{p.name},Malware,{p.stem}," for p in mal]
    rows += [f"benign/{p.name},Benign,," for p in ben]
    (out / "manifest.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return mal, ben
