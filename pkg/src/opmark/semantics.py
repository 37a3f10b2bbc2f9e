"""Small executable models used to check that obfuscation preserves behaviour.

``Machine`` interprets straight-line register code (mov/add/sub/xor/and/or,
xchg, push/pop, nop, cmp/test) with wrapping arithmetic.  Sub-register writes
merge into the low bits of the full register; the x86-64 zero extension of
32-bit writes is not modelled, so ``mov esi, esi`` counts as an identity.

``execution_order`` walks a subroutine from an entry point, following
unconditional jumps inside the subroutine and skipping ``cmp R, 0; jnz``
pairs whose register is known to be zero, and returns the instructions it
passes through.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .asm_model import REGISTERS, AssemblyProgram, Instruction, Kind, instruction_from_text, parse_int, resolve_target

_FAMILIES = sorted({fam for fam, _ in REGISTERS.values()})
_MASK64 = (1 << 64) - 1


class UnsupportedInstruction(ValueError):
    pass


def _slot(reg: str) -> tuple[str, int, int]:
    """(family, shift, width) of a register name."""
    fam, width = REGISTERS[reg]
    shift = 8 if reg in ("ah", "bh", "ch", "dh") else 0
    return fam, shift, width


@dataclass
class Machine:
    regs: dict[str, int] = field(default_factory=lambda: {f: 0 for f in _FAMILIES})
    stack: list[int] = field(default_factory=list)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Machine":
        return cls({f: int(rng.integers(0, 1 << 63)) * 2 + int(rng.integers(0, 2)) for f in _FAMILIES})

    def copy(self) -> "Machine":
        return Machine(dict(self.regs), list(self.stack))

    def read(self, operand: str) -> tuple[int, int]:
        """(value, width); immediates report width 64."""
        op = operand.strip().lower()
        if op in REGISTERS:
            fam, shift, width = _slot(op)
            return (self.regs[fam] >> shift) & ((1 << width) - 1), width
        value = parse_int(op)
        if value is None:
            raise UnsupportedInstruction(f"operand {operand!r}")
        return value & _MASK64, 64

    def write(self, reg: str, value: int) -> None:
        fam, shift, width = _slot(reg.strip().lower())
        mask = ((1 << width) - 1) << shift
        self.regs[fam] = (self.regs[fam] & ~mask & _MASK64) | ((value << shift) & mask)

    def step(self, ins: Instruction) -> None:
        m, ops = ins.mnemonic, ins.operands
        if m == "nop" or m in ("cmp", "test"):
            return
        if m == "push":
            self.stack.append(self.regs[_slot(ops[0].lower())[0]])
            return
        if m == "pop":
            fam = _slot(ops[0].lower())[0]
            self.regs[fam] = self.stack.pop()
            return
        if len(ops) != 2 or ops[0].lower() not in REGISTERS:
            raise UnsupportedInstruction(ins.text)
        dst = ops[0].lower()
        a, width = self.read(dst)
        b, _ = self.read(ops[1])
        mask = (1 << width) - 1
        if m == "mov":
            self.write(dst, b & mask)
        elif m == "add":
            self.write(dst, (a + b) & mask)
        elif m == "sub":
            self.write(dst, (a - b) & mask)
        elif m == "xor":
            self.write(dst, (a ^ b) & mask)
        elif m == "and":
            self.write(dst, a & b & mask)
        elif m == "or":
            self.write(dst, (a | b) & mask)
        elif m == "xchg":
            self.write(dst, b & mask)
            self.write(ops[1].lower(), a)
        else:
            raise UnsupportedInstruction(ins.text)

    def run(self, window: Iterable[Instruction]) -> "Machine":
        for ins in window:
            self.step(ins)
        return self


def as_instructions(lines: Sequence[str | Instruction]) -> list[Instruction]:
    return [l if isinstance(l, Instruction) else instruction_from_text(l) for l in lines]


def equivalent(a: Sequence[str | Instruction], b: Sequence[str | Instruction], rng=None, trials: int = 8) -> bool:
    """Whether two windows leave identical register and stack state.

    Checked from an all-zero state, an all-ones state and ``trials`` random
    states.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    wa, wb = as_instructions(a), as_instructions(b)
    starts = [Machine(), Machine({f: _MASK64 for f in _FAMILIES})]
    starts += [Machine.random(rng) for _ in range(trials)]
    for start in starts:
        ma = start.copy().run(wa)
        mb = start.copy().run(wb)
        if ma.regs != mb.regs or ma.stack != mb.stack:
            return False
    return True


def net_value(window: Sequence[str | Instruction], register: str, start: Optional[Machine] = None) -> int:
    """Value left in ``register`` after running ``window``."""
    m = (start or Machine()).copy().run(as_instructions(window))
    return m.read(register)[0]


# ---------------------------------------------------------------------------
# execution-order walk

_NO_WRITE = {"cmp", "test", "push", "nop"}


def _zero_update(zero: set[str], ins: Instruction) -> None:
    ops = [o.lower() for o in ins.operands]
    if ins.kind is Kind.CALL:
        zero.clear()
        return
    if ins.mnemonic == "xor" and len(ops) == 2 and ops[0] == ops[1] and ops[0] in REGISTERS:
        zero.add(REGISTERS[ops[0]][0])
        return
    if ins.mnemonic in _NO_WRITE or ins.kind is not Kind.PLAIN:
        return
    for op in ops[: 2 if ins.mnemonic == "xchg" else 1]:
        if op in REGISTERS:
            zero.discard(REGISTERS[op][0])


def _follow(program: AssemblyProgram, sub, pos: int, limit: int) -> int:
    """First position reached from ``pos`` after following in-subroutine jumps."""
    for _ in range(limit):
        if pos >= len(sub.body) or sub.body[pos].kind is not Kind.JMP:
            return pos
        hit = resolve_target(program, sub.body[pos].target)
        if hit is None or hit[0].name != sub.name:
            return pos
        pos = hit[1]
    return pos


def _opaque_skip(program: AssemblyProgram, sub, pos: int, zero: set[str]) -> Optional[int]:
    """Position after a ``cmp R, 0; jnz`` pair whose register is known zero."""
    ins = sub.body[pos]
    if ins.mnemonic != "cmp" or len(ins.operands) != 2:
        return None
    reg = ins.operands[0].lower()
    if reg not in REGISTERS or REGISTERS[reg][0] not in zero or parse_int(ins.operands[1]) != 0:
        return None
    nxt = _follow(program, sub, pos + 1, len(sub.body) + 1)
    if nxt < len(sub.body) and sub.body[nxt].mnemonic in ("jnz", "jne"):
        return nxt + 1
    return None


def execution_order(program: AssemblyProgram, subroutine: str, start: int = 0, max_steps: int = 100_000) -> list[tuple]:
    """Instructions visited from ``start`` (as address-free keys).

    Stops at a return, a jump leaving the subroutine, the end of the body or
    the first revisit.  Followed jumps and resolved opaque predicates are not
    part of the result.
    """
    sub = program.subroutine(subroutine)
    body = sub.body
    zero: set[str] = set()
    visited: set[int] = set()
    seq: list[tuple] = []
    pos = start
    for _ in range(max_steps):
        if pos >= len(body) or pos in visited:
            break
        visited.add(pos)
        ins = body[pos]
        if ins.kind is Kind.JMP:
            hit = resolve_target(program, ins.target)
            if hit is not None and hit[0].name == sub.name:
                pos = hit[1]
                continue
        skip = _opaque_skip(program, sub, pos, zero)
        if skip is not None:
            pos = skip
            continue
        seq.append(ins.key())
        _zero_update(zero, ins)
        if ins.kind in (Kind.RET, Kind.JMP):
            break
        pos += 1
    return seq


def entry_points(program: AssemblyProgram, subroutine: str) -> dict[str, int]:
    sub = program.subroutine(subroutine)
    return {subroutine: 0, **dict(sub.labels)}


def same_execution_order(before: AssemblyProgram, after: AssemblyProgram) -> bool:
    """Every subroutine entry and original label walks identically in both programs."""
    for sub in before.subroutines:
        if sub.name not in after.symbol_index:
            return False
        after_sub = after.subroutine(sub.name)
        for label, off in entry_points(before, sub.name).items():
            off_after = 0 if label == sub.name else after_sub.labels.get(label)
            if off_after is None:
                return False
            if execution_order(before, sub.name, off) != execution_order(after, sub.name, off_after):
                return False
    return True
