"""Synthetic flat-asm corpus with two opcode profiles.

Every subroutine is ``entry + motifs + exit``.  Motifs are fixed-length
templates whose operands are randomized, so the expected opcode frequencies
of each class follow directly from the template tables below.  The
malicious class draws from ``(1 - separation) * benign + separation *
malicious-profile`` weights; ``separation = 0`` makes the classes identical.

Both classes call sibling subroutines (which gives the control-flow mode
call-to-entry edges); malicious helpers tend to open with ``pushfq``.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..asm_model import parse_disassembly

SUBROUTINE_RANGE = (3, 7)
MOTIF_RANGE = (4, 10)

# name -> template lines; "{...}" fields are filled per use, ".{L}" is a local label
MOTIFS: dict[str, tuple[str, ...]] = {
    "frame_load": ("mov {r}, qword [rbp-{off}]", "add {r}, {imm}", "mov qword [rbp-{off}], {r}"),
    "const": ("mov {r}, {imm}", "mov qword [rbp-{off}], {r}"),
    "libcall": ("mov rdi, {r}", "call {fn}"),
    "helper_call": ("mov rdi, {r}", "call {helper}", "test eax, eax"),
    "branch": ("cmp {r}, {imm}", "jle .{L}", "mov {r}, {imm}", ".{L}:", "add {r}, {r2}"),
    "strscan": (".{L}:", "movzx eax, byte [rsi]", "inc rsi", "test al, al", "jnz .{L}"),
    "arith": ("lea {r}, [{r2}+{r2}*2]", "shl {r}, 2", "sub {r}, {r2}"),
    "pad": ("nop",),
    "pad_xchg": ("xchg ax, ax",),
    "save_rbx": ("push rbx", "mov rbx, {r}", "pop rbx"),
    "zero": ("xor eax, eax", "mov {r}, rax"),
    "decrypt_loop": (".{L}:", "mov al, byte [rsi]", "xor al, {imm8}", "rol al, 3", "mov byte [rdi], al",
                     "inc rsi", "inc rdi", "dec rcx", "jnz .{L}"),
    "api_hash": ("xor eax, eax", ".{L}:", "movzx edx, byte [rsi]", "ror eax, 13", "add eax, edx",
                 "inc rsi", "test dl, dl", "jnz .{L}"),
    "syscall": ("mov eax, {imm}", "mov r10, rcx", "syscall"),
    "timing": ("rdtsc", "mov r8, rax", "rdtsc", "sub rax, r8", "cmp rax, {imm}", "ja .{L}",
               "xor ecx, ecx", ".{L}:", "mov rcx, rax"),
    "stack_string": ("mov byte [rbp-{off}], {imm8}", "mov byte [rbp-{off}], {imm8}", "lea rsi, [rbp-{off}]"),
}

ENTRIES: dict[str, tuple[str, ...]] = {
    "frame": ("push rbp", "mov rbp, rsp"),
    "leaf": ("sub rsp, {off}",),
    "flags": ("pushfq", "push rbp", "mov rbp, rsp"),
}
EXITS: dict[str, tuple[str, ...]] = {
    "frame": ("pop rbp", "ret"),
    "leaf": ("add rsp, {off}", "ret"),
    "flags": ("pop rbp", "popfq", "ret"),
}

BENIGN_PROFILE = {
    "motifs": {"frame_load": 3, "const": 2, "libcall": 3, "helper_call": 2, "branch": 2, "strscan": 1,
               "arith": 2, "pad": 1, "pad_xchg": 0.5, "save_rbx": 1, "zero": 1},
    "entries": {"frame": 3, "leaf": 1},
}
MALICIOUS_PROFILE = {
    "motifs": {"decrypt_loop": 3, "api_hash": 2, "syscall": 2, "timing": 1, "stack_string": 1,
               "helper_call": 2, "const": 1, "zero": 1},
    "entries": {"flags": 3, "frame": 1},
}
EXIT_FOR_ENTRY = {"frame": "frame", "leaf": "leaf", "flags": "flags"}

REGS64 = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11")
LIBC = ("printf", "strlen", "memcpy", "malloc", "free", "fopen", "fread", "puts")


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    benign: int = 400
    malicious: int = 400
    subroutines: tuple[int, int] = SUBROUTINE_RANGE
    motifs: tuple[int, int] = MOTIF_RANGE
    separation: float = 0.35
    min_total_variation: float = 0.2

    def validate(self) -> None:
        if self.benign < 0 or self.malicious < 0:
            raise InvalidSpec("sample counts must be non-negative")
        for lo, hi in (self.subroutines, self.motifs):
            if not 1 <= lo <= hi:
                raise InvalidSpec(f"bad range ({lo}, {hi})")
        if not 0.0 <= self.separation <= 1.0:
            raise InvalidSpec("separation must lie in [0, 1]")
        tv = expected_total_variation(self)
        if tv < self.min_total_variation:
            raise InvalidSpec(f"class profiles too close: total variation {tv:.3f} < {self.min_total_variation}")


def _normalized(weights: dict[str, float]) -> dict[str, float]:
    s = sum(weights.values())
    return {k: v / s for k, v in weights.items()}


def class_weights(label: str, separation: float) -> tuple[dict[str, float], dict[str, float]]:
    """(motif weights, entry weights) for one class, each summing to 1."""
    out = []
    for part in ("motifs", "entries"):
        ben = _normalized(BENIGN_PROFILE[part])
        if label == "benign":
            out.append(ben)
            continue
        mal = _normalized(MALICIOUS_PROFILE[part])
        keys = sorted(set(ben) | set(mal))
        mixed = {k: (1 - separation) * ben.get(k, 0.0) + separation * mal.get(k, 0.0) for k in keys}
        out.append({k: v for k, v in mixed.items() if v > 0})
    return out[0], out[1]


def _mnemonics(template: tuple[str, ...]) -> list[str]:
    return [line.split()[0] for line in template if not line.endswith(":")]


def expected_unigrams(label: str, spec: CorpusSpec) -> dict[str, float]:
    """Long-run opcode frequencies of a class, straight from the generator tables."""
    motif_w, entry_w = class_weights(label, spec.separation)
    mean_motifs = (spec.motifs[0] + spec.motifs[1]) / 2.0
    counts: Counter = Counter()
    for name, w in motif_w.items():
        for m in _mnemonics(MOTIFS[name]):
            counts[m] += mean_motifs * w
    for name, w in entry_w.items():
        for m in _mnemonics(ENTRIES[name]) + _mnemonics(EXITS[EXIT_FOR_ENTRY[name]]):
            counts[m] += w
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


def expected_total_variation(spec: CorpusSpec) -> float:
    b = expected_unigrams("benign", spec)
    m = expected_unigrams("malicious", spec)
    return 0.5 * sum(abs(b.get(k, 0.0) - m.get(k, 0.0)) for k in set(b) | set(m))


def _pick(rng: np.random.Generator, weights: dict[str, float]) -> str:
    keys = sorted(weights)
    p = np.array([weights[k] for k in keys])
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


_FIELD = re.compile(r"\{(\w+)\}")


def _render(template, rng, label_base: str, helpers: list[str], counter: list[int]) -> list[str]:
    regs = rng.choice(len(REGS64), size=2, replace=False)
    local = f"{label_base}_{counter[0]}"
    counter[0] += 1

    def fill(line: str) -> str:
        def field_(m):
            f = m.group(1)
            if f == "r":
                return REGS64[regs[0]]
            if f == "r2":
                return REGS64[regs[1]]
            if f == "imm":
                return hex(int(rng.integers(1, 0x1000)))
            if f == "imm8":
                return hex(int(rng.integers(1, 0x100)))
            if f == "off":
                return hex(8 * int(rng.integers(1, 16)))
            if f == "fn":
                return LIBC[int(rng.integers(len(LIBC)))]
            if f == "helper":
                pool = helpers or list(LIBC)
                return pool[int(rng.integers(len(pool)))]
            if f == "L":
                return local
            raise KeyError(f)
        return _FIELD.sub(field_, line)

    return [fill(line) for line in template]


def generate_program(label: str, spec: CorpusSpec, rng: np.random.Generator, sample_id: str = "") -> str:
    if label not in ("benign", "malicious"):
        raise InvalidSpec(f"unknown label {label!r}")
    motif_w, entry_w = class_weights(label, spec.separation)
    n_subs = int(rng.integers(spec.subroutines[0], spec.subroutines[1] + 1))
    names = ["main"] + [f"fn_{k}" for k in range(1, n_subs)]
    lines = [f"# synthetic {label} sample {sample_id}".rstrip()]
    for si, name in enumerate(names):
        entry = _pick(rng, entry_w)
        counter = [0]
        body = list(_render(ENTRIES[entry], rng, f"L{si}", [], counter))
        for _ in range(int(rng.integers(spec.motifs[0], spec.motifs[1] + 1))):
            body += _render(MOTIFS[_pick(rng, motif_w)], rng, f"L{si}", names[si + 1:], counter)
        body += _render(EXITS[EXIT_FOR_ENTRY[entry]], rng, f"L{si}", [], counter)
        lines.append(f"{name}:")
        lines += [l if l.endswith(":") else f"    {l}" for l in body]
    return "\n".join(lines) + "\n"


@dataclass
class CorpusSample:
    sample_id: str
    label: str
    text: str
    path: Optional[str] = None


@dataclass
class Corpus:
    spec: CorpusSpec
    seed: int
    samples: list[CorpusSample] = field(default_factory=list)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        for s in self.samples:
            s.path = f"{s.label}/{s.sample_id}.asm"
            p = out / s.path
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(s.text)


def generate_corpus(spec: CorpusSpec = CorpusSpec(), seed: int = 0) -> Corpus:
    """Deterministic in (spec, seed); each file has its own seed stream."""
    spec.validate()
    corpus = Corpus(spec, seed)
    for ci, (label, count) in enumerate((("benign", spec.benign), ("malicious", spec.malicious))):
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, ci, i]))
            sid = f"{label[0]}{i:04d}"
            text = generate_program(label, spec, rng, sid)
            parse_disassembly(text, "flat-asm", sid)  # well-formed by construction; fail loudly if not
            corpus.samples.append(CorpusSample(sid, label, text))
    return corpus
