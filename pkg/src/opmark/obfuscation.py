"""Semantics-preserving obfuscation passes over flat assembly programs.

Every pass is split into a random *plan* (drawn from an explicit
``numpy.random.Generator``) and a deterministic *apply* step, so a recorded
plan replays to the identical program.  ``obfuscate`` composes 1-4 passes
drawn with replacement from the four kinds.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from . import semantics
from .asm_model import (
    REGISTERS,
    AssemblyProgram,
    Instruction,
    Kind,
    instruction_from_text,
    layout,
    parse_int,
)

log = logging.getLogger(__name__)

RECORD_FORMAT = "opmark-obfuscation-record"
RECORD_VERSION = 1


@dataclass(frozen=True)
class NopEntry:
    hex: str
    lines: tuple[str, ...]
    listed_as: str = ""


def _e(hexbytes: str, *lines: str, listed_as: str = "") -> NopEntry:
    return NopEntry(hexbytes, lines, listed_as or "; ".join(lines))


NOP_CATALOG: tuple[NopEntry, ...] = (
    _e("90", "nop"),
    _e("6690", "xchg ax, ax"),
    _e("0f18000000000", "nop DWORD PTR [rax+0x0]"),
    _e("6689c9", "mov cx, cx"),
    _e("87c9", "xchg ecx, ecx"),
    _e("87d2", "xchg edx, edx"),
    _e("0f1f440000", "nop DWORD PTR [rax+rax*1+0x0]"),
    _e("88db", "mov bl, bl"),
    _e("89f6", "mov esi, esi"),
    _e("88c0", "mov al, al"),
    _e("0f1f4000", "nop DWORD PTR [rax+0x0]"),
    _e("5159", "push rcx", "pop rcx", listed_as="push rcx, pop rcx"),
    _e("0f1f00", "nop DWORD PTR [rax]"),
    _e("6689c0", "mov ax, ax"),
    _e("6689db", "mov bx, bx"),
    _e("6687db", "xchg bx, bx"),
    _e("6687c9", "xchg cx, cx"),
    _e("5058", "push rax", "pop rax"),
    _e("535b", "push rbx", "pop rbx"),
    _e("83e800", "sub eax, 0x0"),
    _e("89ff", "mov edi, edi"),
    # listed with a semicolon ("xchg ebx; ebx"); the bytes 87db encode xchg ebx, ebx
    _e("87db", "xchg ebx, ebx", listed_as="xchg ebx; ebx"),
)
_CATALOG_INSNS = tuple(tuple(instruction_from_text(l) for l in e.lines) for e in NOP_CATALOG)


class PassKind(str, enum.Enum):
    DEAD_CODE = "dead-code-insertion"
    REORDER = "subroutine-reordering"
    SUBSTITUTION = "instruction-substitution"
    MIXING = "control-flow-mixing"


ALL_KINDS = tuple(PassKind)


class TooFewSubroutines(ValueError):
    pass


@dataclass(frozen=True)
class ObfuscationPass:
    kind: PassKind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", PassKind(self.kind))
        rate = self.params.get("rate")
        if self.kind is PassKind.REORDER:
            if rate is not None:
                raise ValueError("subroutine reordering takes no rate")
        elif rate is None or not 0 < rate <= 1:
            raise ValueError(f"{self.kind.value}: rate must lie in (0, 1], got {rate}")


@dataclass
class PassRecord:
    kind: PassKind
    params: dict
    sites: Any
    status: str = "applied"
    note: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": self.params, "status": self.status,
                "note": self.note, "sites": self.sites}

    @classmethod
    def from_dict(cls, d: dict) -> "PassRecord":
        return cls(PassKind(d["kind"]), dict(d["params"]), d["sites"], d.get("status", "applied"), d.get("note", ""))


@dataclass
class ObfuscationRecord:
    seed: Optional[int]
    passes: list[PassRecord]

    def to_json(self) -> str:
        return json.dumps({"format": RECORD_FORMAT, "version": RECORD_VERSION, "seed": self.seed,
                           "passes": [p.to_dict() for p in self.passes]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ObfuscationRecord":
        d = json.loads(text)
        if d.get("format") != RECORD_FORMAT or d.get("version") != RECORD_VERSION:
            raise ValueError("not an obfuscation record of a supported version")
        return cls(d["seed"], [PassRecord.from_dict(p) for p in d["passes"]])


@dataclass(frozen=True)
class ObfuscationConfig:
    pool: tuple[PassKind, ...] = ALL_KINDS
    passes: Optional[int] = None  # None: uniform in 1..4
    dead_code_rate: float = 0.05
    substitution_rate: float = 0.3
    mixing_rate: float = 0.2

    def make_pass(self, kind: PassKind) -> ObfuscationPass:
        rate = {PassKind.DEAD_CODE: self.dead_code_rate, PassKind.SUBSTITUTION: self.substitution_rate,
                PassKind.MIXING: self.mixing_rate}.get(kind)
        return ObfuscationPass(kind, {} if rate is None else {"rate": rate})


# ---------------------------------------------------------------------------
# shared editing helper

def _splice(body: Sequence[Instruction], labels: dict[str, int],
            insert_before: dict[int, Sequence[Instruction]] = {},
            replace: dict[int, Sequence[Instruction]] = {}) -> tuple[list[Instruction], dict[str, int]]:
    """Rebuild a body; labels keep pointing at their original instruction."""
    new: list[Instruction] = []
    start_of = {}
    for p, ins in enumerate(body):
        new.extend(insert_before.get(p, ()))
        start_of[p] = len(new)
        new.extend(replace.get(p, (ins,)))
    moved = {l: (start_of[o] if o < len(body) else len(new)) for l, o in labels.items()}
    return new, moved


def _rebuild(program: AssemblyProgram, subs) -> AssemblyProgram:
    return layout(subs, program.origin)


def _fresh_label(program: AssemblyProgram, taken: set[str], base: str) -> str:
    n = 0
    while f"{base}{n}" in program.symbol_index or f"{base}{n}" in taken:
        n += 1
    taken.add(f"{base}{n}")
    return f"{base}{n}"


# ---------------------------------------------------------------------------
# dead code insertion

def plan_dead_code(program: AssemblyProgram, rate: float, rng: np.random.Generator) -> list[dict]:
    sites = []
    for sub in program.subroutines:
        gaps = len(sub.body) - 1
        if gaps <= 0:
            continue
        hits = rng.random(gaps) < rate
        entries = rng.integers(0, len(NOP_CATALOG), size=gaps)
        for g in np.flatnonzero(hits):
            sites.append({"subroutine": sub.name, "gap": int(g) + 1, "entry": int(entries[g])})
    return sites


def apply_dead_code(program: AssemblyProgram, sites: list[dict]) -> AssemblyProgram:
    by_sub: dict[str, dict[int, Sequence[Instruction]]] = {}
    for s in sites:
        by_sub.setdefault(s["subroutine"], {})[s["gap"]] = _CATALOG_INSNS[s["entry"]]
    subs = []
    for sub in program.subroutines:
        body, labels = _splice(sub.body, dict(sub.labels), insert_before=by_sub.get(sub.name, {}))
        subs.append((sub.name, body, labels))
    return _rebuild(program, subs)


def remove_dead_code(program: AssemblyProgram, sites: list[dict]) -> AssemblyProgram:
    """Invert :func:`apply_dead_code`, checking the removed code is the recorded catalog entry."""
    by_sub: dict[str, dict[int, int]] = {}
    for s in sites:
        by_sub.setdefault(s["subroutine"], {})[s["gap"]] = s["entry"]
    subs = []
    for sub in program.subroutines:
        gaps = by_sub.get(sub.name, {})
        body, out_pos, orig_of = [], 0, {}
        p = 0
        while out_pos < len(sub.body):
            if p in gaps:
                expected = _CATALOG_INSNS[gaps[p]]
                got = sub.body[out_pos:out_pos + len(expected)]
                if [i.key() for i in got] != [i.key() for i in expected]:
                    raise ValueError(f"{sub.name}: gap {p} does not hold catalog entry {gaps[p]}")
                out_pos += len(expected)
            orig_of[out_pos] = p
            body.append(sub.body[out_pos])
            out_pos += 1
            p += 1
        orig_of[len(sub.body)] = len(body)
        labels = {l: orig_of[o] for l, o in sub.labels.items()}
        subs.append((sub.name, body, labels))
    return _rebuild(program, subs)


def insert_dead_code(program: AssemblyProgram, rate: float, rng: np.random.Generator):
    ObfuscationPass(PassKind.DEAD_CODE, {"rate": rate})
    sites = plan_dead_code(program, rate, rng)
    return apply_dead_code(program, sites), PassRecord(PassKind.DEAD_CODE, {"rate": rate}, sites)


# ---------------------------------------------------------------------------
# subroutine reordering

def plan_reorder(program: AssemblyProgram, rng: np.random.Generator) -> list[int]:
    n = len(program.subroutines)
    if n < 2:
        raise TooFewSubroutines(f"{n} subroutine(s); reordering needs at least 2")
    identity = list(range(n))
    while True:
        perm = [int(i) for i in rng.permutation(n)]
        if perm != identity:
            return perm


def apply_reorder(program: AssemblyProgram, permutation: Sequence[int]) -> AssemblyProgram:
    if sorted(permutation) != list(range(len(program.subroutines))):
        raise ValueError("not a permutation of the subroutines")
    return _rebuild(program, [program.subroutines[i] for i in permutation])


def reorder_subroutines(program: AssemblyProgram, rng: np.random.Generator):
    perm = plan_reorder(program, rng)
    return apply_reorder(program, perm), PassRecord(PassKind.REORDER, {}, {"permutation": perm})


# ---------------------------------------------------------------------------
# instruction substitution

_NO_SUBST_FAMILIES = {"sp", "ip"}


def _reg(op: str) -> Optional[tuple[str, int]]:
    r = REGISTERS.get(op.strip().lower())
    if r is None or r[0] in _NO_SUBST_FAMILIES:
        return None
    return r


def substitution_pattern(ins: Instruction) -> Optional[str]:
    if len(ins.operands) != 2:
        return None
    dst, src = ins.operands
    if ins.mnemonic == "mov" and _reg(dst) and parse_int(src) is not None:
        return "static-value"
    if ins.mnemonic == "add" and _reg(dst) and _reg(src) and _reg(dst)[0] != _reg(src)[0]:
        return "binary-operator"
    return None


def static_value_constants(imm: int, width: int, rng: np.random.Generator) -> tuple[int, int, int]:
    """Draw c1, c2 uniformly and solve ``((c1 + c2) mod 2^w) XOR c3 == imm``."""
    mask = (1 << width) - 1
    c1 = int(rng.integers(0, 1 << min(width, 62))) & mask
    c2 = int(rng.integers(0, 1 << min(width, 62))) & mask
    c3 = ((c1 + c2) & mask) ^ (imm & mask)
    return c1, c2, c3


def substitution_window(ins: Instruction, pattern: str, constants: Sequence[int]) -> list[Instruction]:
    dst, src = ins.operands
    if pattern == "static-value":
        c1, c2, c3 = constants
        lines = [f"mov {dst}, {c1:#x}", f"add {dst}, {c2:#x}", f"xor {dst}, {c3:#x}"]
    elif pattern == "binary-operator":
        (r,) = constants
        lines = [f"add {dst}, {r:#x}", f"add {dst}, {src}", f"sub {dst}, {r:#x}"]
    else:
        raise ValueError(f"unknown substitution pattern {pattern!r}")
    return [instruction_from_text(l) for l in lines]


def plan_substitution(program: AssemblyProgram, rate: float, rng: np.random.Generator) -> list[dict]:
    sites = []
    for sub in program.subroutines:
        for off, ins in enumerate(sub.body):
            pattern = substitution_pattern(ins)
            if pattern is None or rng.random() >= rate:
                continue
            width = _reg(ins.operands[0])[1]
            if pattern == "static-value":
                constants = static_value_constants(parse_int(ins.operands[1]), width, rng)
            else:
                constants = (int(rng.integers(1, 1 << min(width, 31))),)
            sites.append({"subroutine": sub.name, "offset": off, "pattern": pattern,
                          "constants": [int(c) for c in constants]})
    return sites


def apply_substitution(program: AssemblyProgram, sites: list[dict]) -> AssemblyProgram:
    by_sub: dict[str, dict[int, list[Instruction]]] = {}
    for s in sites:
        ins = program.subroutine(s["subroutine"]).body[s["offset"]]
        by_sub.setdefault(s["subroutine"], {})[s["offset"]] = substitution_window(ins, s["pattern"], s["constants"])
    subs = []
    for sub in program.subroutines:
        body, labels = _splice(sub.body, dict(sub.labels), replace=by_sub.get(sub.name, {}))
        subs.append((sub.name, body, labels))
    return _rebuild(program, subs)


def substitute_instructions(program: AssemblyProgram, rate: float, rng: np.random.Generator):
    ObfuscationPass(PassKind.SUBSTITUTION, {"rate": rate})
    sites = plan_substitution(program, rate, rng)
    return apply_substitution(program, sites), PassRecord(PassKind.SUBSTITUTION, {"rate": rate}, sites)


# ---------------------------------------------------------------------------
# control flow mixing

def blocks(body: Sequence[Instruction], labels: dict[str, int]) -> list[tuple[int, int]]:
    """Layout blocks ``[start, end)``: split at labels and after jumps/returns."""
    leaders = {0} | {o for o in labels.values() if o < len(body)}
    for i, ins in enumerate(body):
        if ins.kind in (Kind.JMP, Kind.JCC, Kind.RET) and i + 1 < len(body):
            leaders.add(i + 1)
    cuts = sorted(leaders) + [len(body)]
    return [(a, b) for a, b in zip(cuts, cuts[1:]) if b > a]


def _is_zeroing(ins: Instruction) -> bool:
    ops = [o.lower() for o in ins.operands]
    return ins.mnemonic == "xor" and len(ops) == 2 and ops[0] == ops[1] and _reg(ops[0]) is not None


def plan_mixing(program: AssemblyProgram, rate: float, rng: np.random.Generator, tag: str = "0") -> list[dict]:
    sites = []
    taken: set[str] = set()
    for sub in program.subroutines:
        body = sub.body
        for start, end in blocks(body, dict(sub.labels)):
            if rng.random() >= rate:
                continue
            variants = []
            if end - start >= 2 and (end < len(body) or body[end - 1].kind in (Kind.JMP, Kind.RET)):
                variants.append("outline")
            zeroing = [i for i in range(start, end) if _is_zeroing(body[i])]
            if zeroing:
                variants.append("opaque")
            if not variants:
                continue
            variant = variants[int(rng.integers(len(variants)))]
            if variant == "outline":
                split = int(rng.integers(1, end - start))
                falls = body[end - 1].kind not in (Kind.JMP, Kind.RET)
                site = {"subroutine": sub.name, "variant": variant, "block": [start, end], "split": split,
                        "label": _fresh_label(program, taken, f".Lmix{tag}_"),
                        "return_label": _fresh_label(program, taken, f".Lmix{tag}_") if falls else None}
            else:
                at = zeroing[int(rng.integers(len(zeroing)))]
                site = {"subroutine": sub.name, "variant": variant, "block": [start, end], "after": at,
                        "label": _fresh_label(program, taken, f".never_reached{tag}_")}
            sites.append(site)
    return sites


def _mix_subroutine(sub, sites: list[dict]):
    body = sub.body
    by_block = {tuple(s["block"]): s for s in sites}
    orig_labels = dict(sub.labels)
    new: list[Instruction] = []
    start_of: dict[int, int] = {}
    outlined: list[tuple[str, list[Instruction]]] = []
    returns: list[tuple[str, int]] = []  # (label, original offset it marks)
    end_labels = [l for l, o in orig_labels.items() if o >= len(body)]
    for start, end in blocks(body, orig_labels):
        site = by_block.get((start, end))
        cut = end if site is None or site["variant"] == "opaque" else start + site["split"]
        for p in range(start, cut):
            start_of[p] = len(new)
            new.append(body[p])
            if site is not None and site["variant"] == "opaque" and p == site["after"]:
                new.append(instruction_from_text(f"cmp {body[p].operands[0]}, 0"))
                new.append(instruction_from_text(f"jnz {site['label']}"))
                end_labels.append(site["label"])
        if cut == end:
            continue
        new.append(instruction_from_text(f"jmp {site['label']}"))
        tail = list(body[cut:end])
        if site["return_label"] is not None:
            tail.append(instruction_from_text(f"jmp {site['return_label']}"))
            returns.append((site["return_label"], end))
        outlined.append((site["label"], tail))
    labels = {l: start_of[o] for l, o in orig_labels.items() if o < len(body)}
    for label, off in returns:
        labels[label] = start_of[off]
    for label, tail in outlined:
        labels[label] = len(new)
        new.extend(tail)
    for label in end_labels:
        labels[label] = len(new)
    return new, labels


def apply_mixing(program: AssemblyProgram, sites: list[dict]) -> AssemblyProgram:
    by_sub: dict[str, list[dict]] = {}
    for s in sites:
        by_sub.setdefault(s["subroutine"], []).append(s)
    subs = []
    for sub in program.subroutines:
        if sub.name in by_sub:
            body, labels = _mix_subroutine(sub, by_sub[sub.name])
            subs.append((sub.name, body, labels))
        else:
            subs.append(sub)
    return _rebuild(program, subs)


def mix_control_flow(program: AssemblyProgram, rate: float, rng: np.random.Generator, tag: str = "0"):
    ObfuscationPass(PassKind.MIXING, {"rate": rate})
    sites = plan_mixing(program, rate, rng, tag)
    return apply_mixing(program, sites), PassRecord(PassKind.MIXING, {"rate": rate}, sites)


# ---------------------------------------------------------------------------
# composition and replay

def apply_pass(program: AssemblyProgram, record: PassRecord) -> AssemblyProgram:
    if record.status != "applied":
        return program
    if record.kind is PassKind.DEAD_CODE:
        return apply_dead_code(program, record.sites)
    if record.kind is PassKind.REORDER:
        return apply_reorder(program, record.sites["permutation"])
    if record.kind is PassKind.SUBSTITUTION:
        return apply_substitution(program, record.sites)
    return apply_mixing(program, record.sites)


def run_pass(program: AssemblyProgram, p: ObfuscationPass, rng: np.random.Generator, index: int = 0):
    rate = p.params.get("rate")
    if p.kind is PassKind.DEAD_CODE:
        return insert_dead_code(program, rate, rng)
    if p.kind is PassKind.REORDER:
        try:
            return reorder_subroutines(program, rng)
        except TooFewSubroutines as exc:
            return program, PassRecord(p.kind, {}, None, status="skipped", note=str(exc))
    if p.kind is PassKind.SUBSTITUTION:
        return substitute_instructions(program, rate, rng)
    return mix_control_flow(program, rate, rng, tag=str(index))


def obfuscate(program: AssemblyProgram, config: ObfuscationConfig = ObfuscationConfig(),
              seed: int = 0) -> tuple[AssemblyProgram, ObfuscationRecord]:
    """Apply ``k`` passes (k uniform in 1..4 unless fixed), kinds drawn with replacement."""
    rng = np.random.default_rng(seed)
    k = config.passes if config.passes is not None else int(rng.integers(1, 5))
    if not 1 <= k <= 4:
        raise ValueError(f"pass count must be within 1..4, got {k}")
    kinds = [config.pool[int(i)] for i in rng.integers(0, len(config.pool), size=k)]
    record = ObfuscationRecord(seed, [])
    out = program
    for index, kind in enumerate(kinds):
        out, rec = run_pass(out, config.make_pass(kind), rng, index)
        record.passes.append(rec)
    before, after = len(program), len(out)
    log.debug("obfuscated %s: %d -> %d instructions over %d pass(es)", program.origin[0], before, after, k)
    return out, record


def replay(program: AssemblyProgram, record: ObfuscationRecord, intermediates: bool = False):
    """Re-apply a record; with ``intermediates`` also return each pass's input program."""
    stages = [program]
    for rec in record.passes:
        stages.append(apply_pass(stages[-1], rec))
    return (stages[-1], stages) if intermediates else stages[-1]


# ---------------------------------------------------------------------------
# soundness checks

def check_pass(before: AssemblyProgram, after: AssemblyProgram, rec: PassRecord, rng=None) -> list[str]:
    """Problems found when checking one applied pass; empty when sound."""
    problems: list[str] = []
    if rec.status != "applied":
        if before.key() != after.key():
            problems.append("skipped pass changed the program")
        return problems
    if rec.kind is PassKind.DEAD_CODE:
        try:
            restored = remove_dead_code(after, rec.sites)
        except ValueError as exc:
            return [str(exc)]
        if restored.key() != before.key():
            problems.append("dead code removal does not restore the input")
    elif rec.kind is PassKind.REORDER:
        a = sorted(s.key() for s in before.subroutines)
        b = sorted(s.key() for s in after.subroutines)
        if a != b:
            problems.append("subroutine multiset changed")
        if [s.name for s in after.subroutines] == [s.name for s in before.subroutines]:
            problems.append("reordering left the order unchanged")
    elif rec.kind is PassKind.SUBSTITUTION:
        for s in rec.sites:
            ins = before.subroutine(s["subroutine"]).body[s["offset"]]
            window = substitution_window(ins, s["pattern"], s["constants"])
            if not semantics.equivalent([ins], window, rng):
                problems.append(f"substitution at {s['subroutine']}+{s['offset']} changes register state")
    elif rec.kind is PassKind.MIXING:
        if not semantics.same_execution_order(before, after):
            problems.append("control flow mixing changed the execution order")
    return problems


def check_record(program: AssemblyProgram, record: ObfuscationRecord, rng=None) -> list[str]:
    _, stages = replay(program, record, intermediates=True)
    problems = []
    for i, rec in enumerate(record.passes):
        problems += [f"pass {i} ({rec.kind.value}): {p}" for p in check_pass(stages[i], stages[i + 1], rec, rng)]
    return problems


def catalog_is_identity(rng=None) -> list[str]:
    """Catalog entries that change modelled register or stack state."""
    return [e.hex for e, insns in zip(NOP_CATALOG, _CATALOG_INSNS) if not semantics.equivalent([], insns, rng)]
