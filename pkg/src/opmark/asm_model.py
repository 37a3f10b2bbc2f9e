"""Structured model of x86 disassembly: instructions, subroutines, programs.

Three listing formats are understood: objdump output in AT&T or Intel syntax,
and a flat assembly format (``name:`` opens a subroutine, ``.name:`` marks a
local label inside the current subroutine, one instruction per line, ``#``
starts a comment).
"""
from __future__ import annotations

import enum
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

log = logging.getLogger(__name__)

Target = Union[str, int]

UNKNOWN = "<unk>"


class AsmError(ValueError):
    pass


class MalformedListing(AsmError):
    pass


class DuplicateSymbol(AsmError):
    pass


class EmptyProgram(AsmError):
    pass


class Kind(str, enum.Enum):
    PLAIN = "plain"
    JCC = "jump-conditional"
    JMP = "jump-unconditional"
    CALL = "call"
    RET = "return"

    @property
    def is_branch(self) -> bool:
        return self in (Kind.JCC, Kind.JMP, Kind.CALL)


_JCC = {
    "ja", "jae", "jb", "jbe", "jc", "jcxz", "jecxz", "jrcxz", "je", "jeq", "jg",
    "jge", "jl", "jle", "jna", "jnae", "jnb", "jnbe", "jnc", "jne", "jng", "jnge",
    "jnl", "jnle", "jno", "jnp", "jns", "jnz", "jo", "jp", "jpe", "jpo", "js", "jz",
    "loop", "loope", "loopne", "loopz", "loopnz",
}
_JMP = {"jmp", "jmpq", "jmpl", "ljmp"}
_CALL = {"call", "callq", "calll", "lcall"}
_RET = {"ret", "retq", "retl", "retn", "retf", "lret", "iret", "iretq"}

PREFIXES = {
    "lock", "rep", "repe", "repz", "repne", "repnz", "bnd", "notrack",
    "data16", "addr32", "cs", "ds", "es", "ss", "fs", "gs",
}

# register name -> (family, bit width)
REGISTERS: dict[str, tuple[str, int]] = {}
for _fam, _names in {
    "a": ("rax", "eax", "ax", "al"),
    "b": ("rbx", "ebx", "bx", "bl"),
    "c": ("rcx", "ecx", "cx", "cl"),
    "d": ("rdx", "edx", "dx", "dl"),
    "si": ("rsi", "esi", "si", "sil"),
    "di": ("rdi", "edi", "di", "dil"),
    "bp": ("rbp", "ebp", "bp", "bpl"),
    "sp": ("rsp", "esp", "sp", "spl"),
}.items():
    for _name, _bits in zip(_names, (64, 32, 16, 8)):
        REGISTERS[_name] = (_fam, _bits)
for _fam in ("ah", "bh", "ch", "dh"):
    REGISTERS[_fam] = (_fam[0], 8)
for _i in range(8, 16):
    for _suffix, _bits in (("", 64), ("d", 32), ("w", 16), ("b", 8)):
        REGISTERS[f"r{_i}{_suffix}"] = (f"r{_i}", _bits)
REGISTERS.update({"rip": ("ip", 64), "eip": ("ip", 32)})


def classify_instruction(mnemonic: str, operands: Iterable[str] = ()) -> Kind:
    """Control-flow class of a mnemonic; anything unrecognized is plain."""
    m = mnemonic.lower()
    if m in _RET:
        return Kind.RET
    if m in _CALL:
        return Kind.CALL
    if m in _JMP:
        return Kind.JMP
    if m in _JCC:
        return Kind.JCC
    return Kind.PLAIN


def parse_int(token: str) -> Optional[int]:
    """Integer literal in ``0x..``, ``$0x..``, ``..h`` or decimal form."""
    t = token.strip().lstrip("$")
    neg = t.startswith("-")
    if neg:
        t = t[1:]
    try:
        if t.lower().startswith("0x"):
            v = int(t, 16)
        elif t.lower().endswith("h") and len(t) > 1:
            v = int(t[:-1], 16)
        elif t.isdigit():
            v = int(t, 10)
        else:
            return None
    except ValueError:
        return None
    return -v if neg else v


def _is_indirect(token: str) -> bool:
    t = token.strip().lower()
    return (
        t.startswith("*")
        or t.startswith("%")
        or "[" in t
        or "(" in t
        or t in REGISTERS
        or "ptr" in t
    )


def branch_target(kind: Kind, operands: tuple[str, ...]) -> Optional[Target]:
    """Statically visible target of a jump/call, ``None`` for indirect ones."""
    if not kind.is_branch or not operands:
        return None
    op = operands[-1].strip()
    if not op or _is_indirect(op):
        return None
    value = parse_int(op)
    if value is not None:
        return value
    if re.fullmatch(r"[A-Za-z_.$@?][\w.$@?]*", op):
        return op
    return None


def split_operands(text: str) -> tuple[str, ...]:
    """Split on top-level commas; commas inside brackets/parens are kept."""
    ops, depth, cur = [], 0, []
    for ch in text:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
        if ch == "," and depth == 0:
            ops.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or ops:
        ops.append(tail)
    return tuple(o for o in ops if o)


@dataclass(frozen=True)
class Instruction:
    address: int
    mnemonic: str
    operands: tuple[str, ...] = ()
    kind: Kind = Kind.PLAIN
    target: Optional[Target] = None

    def __post_init__(self):
        if not self.mnemonic or any(c.isspace() for c in self.mnemonic):
            raise AsmError(f"bad mnemonic {self.mnemonic!r}")
        if self.target is not None and not self.kind.is_branch:
            raise AsmError(f"{self.mnemonic}: target on a {self.kind.value} instruction")

    @classmethod
    def make(cls, mnemonic: str, *operands: str, address: int = 0) -> "Instruction":
        """Build an instruction, classifying it and extracting its target."""
        m = mnemonic.lower()
        ops = tuple(operands)
        kind = classify_instruction(m, ops)
        return cls(address, m, ops, kind, branch_target(kind, ops))

    @property
    def text(self) -> str:
        if self.operands:
            return f"{self.mnemonic} {', '.join(self.operands)}"
        return self.mnemonic

    def key(self) -> tuple:
        """Address-free identity used for structural comparisons."""
        return (self.mnemonic, self.operands, self.kind, self.target)

    def at(self, address: int) -> "Instruction":
        return Instruction(address, self.mnemonic, self.operands, self.kind, self.target)


@dataclass(frozen=True)
class Subroutine:
    name: str
    start_address: int
    body: tuple[Instruction, ...] = ()
    # local label -> offset into body; offset == len(body) marks the end
    labels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        addrs = [i.address for i in self.body]
        if any(b <= a for a, b in zip(addrs, addrs[1:])):
            raise AsmError(f"{self.name}: addresses not strictly increasing")
        for label, off in self.labels.items():
            if not 0 <= off <= len(self.body):
                raise AsmError(f"{self.name}: label {label} offset {off} out of range")

    @property
    def returns(self) -> bool:
        return any(i.kind is Kind.RET for i in self.body)

    def key(self) -> tuple:
        return (
            self.name,
            tuple(i.key() for i in self.body),
            tuple(sorted(self.labels.items())),
        )


@dataclass(frozen=True)
class AssemblyProgram:
    subroutines: tuple[Subroutine, ...]
    origin: tuple[str, str] = ("<memory>", "flat-asm")
    symbol_index: Mapping[Target, tuple[int, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index: dict[Target, tuple[int, int]] = {}
        for si, sub in enumerate(self.subroutines):
            if sub.name in index:
                raise DuplicateSymbol(sub.name)
            index[sub.name] = (si, 0)
        for si, sub in enumerate(self.subroutines):
            for label, off in sub.labels.items():
                if label in index:
                    raise DuplicateSymbol(label)
                index[label] = (si, off)
        for si, sub in enumerate(self.subroutines):
            for off, ins in enumerate(sub.body):
                index.setdefault(ins.address, (si, off))
        for si, sub in enumerate(self.subroutines):
            if sub.body:
                index[sub.start_address] = (si, 0)
            else:
                index.setdefault(sub.start_address, (si, 0))
        object.__setattr__(self, "symbol_index", index)

    def __iter__(self):
        for sub in self.subroutines:
            yield from sub.body

    def __len__(self):
        return sum(len(s.body) for s in self.subroutines)

    def key(self) -> tuple:
        return tuple(s.key() for s in self.subroutines)

    def subroutine(self, name: str) -> Subroutine:
        si, _ = self.symbol_index[name]
        return self.subroutines[si]

    def mnemonic_counts(self) -> Counter:
        return Counter(i.mnemonic for i in self)


@dataclass(frozen=True)
class OpcodeVocabulary:
    tokens: tuple[str, ...]
    index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNKNOWN:
            raise ValueError("vocabulary must start with the UNKNOWN token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_mnemonics(cls, mnemonics: Iterable[str]) -> "OpcodeVocabulary":
        return cls((UNKNOWN, *[m for m in mnemonics if m != UNKNOWN]))

    def __len__(self):
        return len(self.tokens)

    def lookup(self, mnemonic: str) -> int:
        return self.index.get(mnemonic, 0)


# ---------------------------------------------------------------------------
# construction helpers

def layout(subroutines: Iterable, origin=("<memory>", "flat-asm"), base: int = 0) -> AssemblyProgram:
    """Reassign sequential addresses (one unit per instruction).

    Accepts :class:`Subroutine` objects or ``(name, instructions, labels)``
    triples whose instruction addresses are ignored.
    """
    subs, addr = [], base
    for sub in subroutines:
        name, instructions, labels = (sub.name, sub.body, sub.labels) if isinstance(sub, Subroutine) else sub
        body = []
        start = addr
        for ins in instructions:
            body.append(ins.at(addr))
            addr += 1
        subs.append(Subroutine(name, start, tuple(body), dict(labels)))
    return AssemblyProgram(tuple(subs), origin)


def program_from_lists(spec: Mapping[str, Iterable[str]], origin=("<memory>", "flat-asm")) -> AssemblyProgram:
    """Quick builder: ``{"main": ["cmp bx, cx", "jeq istrue"], ...}``."""
    text = "\n".join(f"{name}:\n" + "\n".join(f"  {line}" for line in lines) for name, lines in spec.items())
    return parse_disassembly(text, "flat-asm", origin=origin[0])


# ---------------------------------------------------------------------------
# parsing

_OBJDUMP_SYMBOL = re.compile(r"^\s*([0-9a-fA-F]+)\s+<([^>]+)>:\s*$")
_OBJDUMP_INSN = re.compile(r"^\s*([0-9a-fA-F]+):\s*(.*)$")
_HEXBYTE = re.compile(r"^[0-9a-f]{2}$")
_LABEL = re.compile(r"^\s*([A-Za-z_.$@?][\w.$@?]*):\s*$")
_ANNOTATION = re.compile(r"\s*<[^>]*>\s*$")

FORMATS = ("objdump-att", "objdump-intel", "flat-asm")


@dataclass
class ParseReport:
    instructions: int = 0
    skipped: int = 0
    unparsed: list[str] = field(default_factory=list)


class _Builder:
    def __init__(self):
        self.subs: list[tuple[str, Optional[int], list[Instruction], dict[str, int]]] = []
        self.names: set[str] = set()

    def open(self, name: str, address: Optional[int] = None):
        if name in self.names:
            raise DuplicateSymbol(name)
        self.names.add(name)
        self.subs.append((name, address, [], {}))

    def label(self, name: str):
        if not self.subs:
            self.open("__toplevel__")
        if name in self.names:
            raise DuplicateSymbol(name)
        self.names.add(name)
        _, _, body, labels = self.subs[-1]
        labels[name] = len(body)

    def add(self, ins: Instruction):
        if not self.subs:
            self.open("__toplevel__", ins.address)
        self.subs[-1][2].append(ins)

    def build(self, origin: tuple[str, str], explicit_addresses: bool) -> AssemblyProgram:
        if not any(body for _, _, body, _ in self.subs):
            raise MalformedListing("no instruction lines found")
        if not explicit_addresses:
            return layout(((n, b, l) for n, _, b, l in self.subs), origin)
        subs = []
        for i, (name, addr, body, labels) in enumerate(self.subs):
            if addr is None:
                addr = body[0].address if body else 0
            subs.append(Subroutine(name, addr, tuple(body), labels))
        return AssemblyProgram(tuple(subs), origin)


def _split_mnemonic(text: str) -> tuple[str, tuple[str, ...]]:
    parts = text.split(None, 1)
    prefixes = []
    while parts and parts[0].lower() in PREFIXES and len(parts) > 1:
        prefixes.append(parts[0].lower())
        parts = parts[1].split(None, 1)
    mnemonic = parts[0].lower()
    rest = parts[1] if len(parts) > 1 else ""
    return mnemonic, (*prefixes, *split_operands(rest))


def _objdump_instruction(address: int, rest: str) -> Optional[Instruction]:
    tokens = rest.split()
    i = 0
    while i < len(tokens) and _HEXBYTE.match(tokens[i]):
        i += 1
    text = " ".join(tokens[i:])
    text = text.split("#", 1)[0].strip()
    if not text:
        return None
    mnemonic, operands = _split_mnemonic(text)
    if not re.fullmatch(r"[a-z][a-z0-9.]*", mnemonic):
        raise AsmError(f"unparseable instruction {text!r}")
    kind = classify_instruction(mnemonic, operands)
    if kind.is_branch and operands:
        # "call 401020 <strlen@plt>" -> operand "0x401020"
        last = _ANNOTATION.sub("", operands[-1])
        if re.fullmatch(r"[0-9a-fA-F]+", last):
            last = hex(int(last, 16))
        operands = (*operands[:-1], last)
    return Instruction(address, mnemonic, operands, kind, branch_target(kind, operands))


def instruction_from_text(text: str, address: int = 0) -> Instruction:
    """One flat-asm instruction line, e.g. ``"mov eax, 0x12"``."""
    mnemonic, operands = _split_mnemonic(text.strip())
    kind = classify_instruction(mnemonic, operands)
    return Instruction(address, mnemonic, operands, kind, branch_target(kind, operands))


def parse_disassembly(text: str, format: str = "flat-asm", origin: str = "<memory>",
                      report: Optional[ParseReport] = None) -> AssemblyProgram:
    """Parse a disassembly listing into an :class:`AssemblyProgram`.

    Lines that look like instructions but cannot be decoded are tallied in
    ``report`` and skipped; the listing is rejected only when nothing parses.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    report = report if report is not None else ParseReport()
    b = _Builder()
    if format == "flat-asm":
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].rstrip()
            if not line.strip():
                continue
            m = _LABEL.match(line)
            if m:
                name = m.group(1)
                b.label(name) if name.startswith(".") else b.open(name)
                continue
            stripped = line.strip()
            if stripped.startswith(".") and " " not in stripped:
                report.skipped += 1  # bare directive
                continue
            try:
                mnemonic, operands = _split_mnemonic(stripped)
                if not re.fullmatch(r"[a-z][a-z0-9.]*", mnemonic):
                    raise AsmError(stripped)
                kind = classify_instruction(mnemonic, operands)
                b.add(Instruction(0, mnemonic, operands, kind, branch_target(kind, operands)))
                report.instructions += 1
            except AsmError:
                report.skipped += 1
                report.unparsed.append(raw)
        program = b.build((origin, format), explicit_addresses=False)
    else:
        for raw in text.splitlines():
            if not raw.strip():
                continue
            m = _OBJDUMP_SYMBOL.match(raw)
            if m:
                b.open(m.group(2), int(m.group(1), 16))
                continue
            m = _OBJDUMP_INSN.match(raw)
            if not m:
                continue  # headers, section banners, "..." elisions
            try:
                ins = _objdump_instruction(int(m.group(1), 16), m.group(2))
            except AsmError:
                report.skipped += 1
                report.unparsed.append(raw)
                continue
            if ins is None:
                continue  # byte-only continuation line
            b.add(ins)
            report.instructions += 1
        program = b.build((origin, format), explicit_addresses=True)
    if report.skipped:
        log.warning("%s: skipped %d unparseable line(s)", origin, report.skipped)
    return program


def load_program(path, format: Optional[str] = None) -> AssemblyProgram:
    p = Path(path)
    if format is None:
        format = "flat-asm" if p.suffix in (".asm", ".s") else "objdump-intel"
    return parse_disassembly(p.read_text(), format, origin=str(p))


def emit_flat(program: AssemblyProgram) -> str:
    """Canonical flat-asm text; parses back to the same program."""
    out = []
    for sub in program.subroutines:
        out.append(f"{sub.name}:")
        by_offset: dict[int, list[str]] = {}
        for label, off in sub.labels.items():
            by_offset.setdefault(off, []).append(label)
        for off in range(len(sub.body) + 1):
            for label in by_offset.get(off, ()):
                out.append(f"{label}:")
            if off < len(sub.body):
                out.append(f"    {sub.body[off].text}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# queries

def linear_trace(program: AssemblyProgram) -> list[str]:
    trace = [ins.mnemonic for ins in program]
    if not trace:
        raise EmptyProgram(program.origin[0])
    return trace


def resolve_target(program: AssemblyProgram, target: Optional[Target]) -> Optional[tuple[Subroutine, int]]:
    """Exact symbol or address lookup; unresolvable targets give ``None``."""
    if target is None:
        return None
    hit = program.symbol_index.get(target)
    if hit is None:
        return None
    si, off = hit
    return program.subroutines[si], off
