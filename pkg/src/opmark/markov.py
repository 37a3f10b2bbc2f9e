"""Opcode transition counts and row-stochastic Markov matrices.

Two extraction modes share one vocabulary: ``linear`` counts bigrams along
the disassembly order, ``cfg`` additionally follows statically resolvable
jump and call targets.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import container
from .asm_model import (
    UNKNOWN,
    AssemblyProgram,
    EmptyProgram,
    Kind,
    OpcodeVocabulary,
    linear_trace,
    resolve_target,
)

log = logging.getLogger(__name__)

MODES = ("linear", "cfg")
MAGIC = b"OMK1"
DEFAULT_VOCAB_CAP = 128


class EmptyCorpus(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    schema: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("feature vector must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{self.schema}: non-finite feature values")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def concat(self, other: "FeatureVector") -> "FeatureVector":
        return FeatureVector(join_schema(self.schema, other.schema), np.concatenate([self.values, other.values]))


def split_schema(schema: str) -> tuple[list[str], str]:
    """``"MM+GF:cfg"`` -> (["MM", "GF"], "cfg"); ``"MM,cfg"`` is accepted too."""
    sep = ":" if ":" in schema else ","
    parts, _, mode = schema.partition(sep)
    mode = mode.strip() or "linear"
    if mode not in MODES:
        raise ValueError(f"unknown matrix mode {mode!r}")
    blocks = [p.strip() for p in parts.split("+") if p.strip()]
    for b in blocks:
        if b not in ("MM", "ICA-MM", "GF"):
            raise ValueError(f"unknown feature block {b!r}")
    if not blocks:
        raise ValueError(f"empty schema {schema!r}")
    return blocks, mode


def join_schema(a: str, b: str) -> str:
    ba, ma = split_schema(a)
    bb, mb = split_schema(b)
    if ma != mb:
        raise ValueError(f"cannot join {a} and {b}: modes differ")
    return "+".join(ba + bb) + ":" + ma


@dataclass(frozen=True)
class TransitionCounts:
    vocabulary: OpcodeVocabulary
    counts: np.ndarray
    short_trace: bool = False

    def __post_init__(self):
        V = len(self.vocabulary)
        if self.counts.shape != (V, V):
            raise ValueError(f"counts shape {self.counts.shape} != ({V}, {V})")
        if (self.counts < 0).any():
            raise ValueError("negative transition count")


@dataclass(frozen=True)
class MarkovMatrix:
    vocabulary: OpcodeVocabulary
    probs: np.ndarray
    mode: str = "linear"
    short_trace: bool = field(default=False, compare=False)

    def __post_init__(self):
        V = len(self.vocabulary)
        if self.probs.shape != (V, V):
            raise ValueError(f"matrix shape {self.probs.shape} != ({V}, {V})")

    def __getitem__(self, pair: tuple[str, str]) -> float:
        x, y = pair
        return float(self.probs[self.vocabulary.lookup(x), self.vocabulary.lookup(y)])

    def save(self, path) -> None:
        container.save(path, MAGIC, {"tokens": list(self.vocabulary.tokens), "mode": self.mode},
                       {"probs": self.probs.astype(np.float64)})

    @classmethod
    def load(cls, path) -> "MarkovMatrix":
        meta, arrays = container.load(path, MAGIC)
        return cls(OpcodeVocabulary(tuple(meta["tokens"])), arrays["probs"], meta["mode"])

    def to_json(self) -> str:
        """Readable dump listing only the nonzero transitions."""
        t = self.vocabulary.tokens
        rows, cols = np.nonzero(self.probs)
        edges = [[t[r], t[c], float(self.probs[r, c])] for r, c in zip(rows, cols)]
        return json.dumps({"format": "OMK1-debug", "mode": self.mode, "tokens": list(t),
                           "transitions": edges}, indent=1)


def build_vocabulary(corpus: Iterable[AssemblyProgram], cap: int = DEFAULT_VOCAB_CAP) -> OpcodeVocabulary:
    """The ``cap - 1`` most frequent mnemonics (ties broken lexicographically) plus UNKNOWN."""
    if cap < 1:
        raise ValueError("cap must be positive")
    freq: Counter = Counter()
    seen = False
    for program in corpus:
        seen = True
        freq.update(program.mnemonic_counts())
    if not seen:
        raise EmptyCorpus("vocabulary needs at least one program")
    freq.pop(UNKNOWN, None)
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    return OpcodeVocabulary.from_mnemonics(m for m, _ in ranked[: cap - 1])


def _indices(trace: Sequence[str], vocabulary: OpcodeVocabulary) -> np.ndarray:
    lookup = vocabulary.index
    return np.fromiter((lookup.get(m, 0) for m in trace), dtype=np.int64, count=len(trace))


def count_bigrams(trace: Sequence[str], vocabulary: OpcodeVocabulary) -> TransitionCounts:
    V = len(vocabulary)
    if len(trace) < 2:
        log.warning("trace of length %d has no bigrams", len(trace))
        return TransitionCounts(vocabulary, np.zeros((V, V), dtype=np.int64), short_trace=True)
    idx = _indices(trace, vocabulary)
    flat = np.bincount(idx[:-1] * V + idx[1:], minlength=V * V)
    return TransitionCounts(vocabulary, flat.reshape(V, V).astype(np.int64))


def normalize(counts: TransitionCounts, mode: str = "linear") -> MarkovMatrix:
    c = counts.counts.astype(np.float64)
    rowsum = c.sum(axis=1, keepdims=True)
    probs = np.divide(c, rowsum, out=np.zeros_like(c), where=rowsum > 0)
    return MarkovMatrix(counts.vocabulary, probs, mode, counts.short_trace)


def build_linear(program: AssemblyProgram, vocabulary: OpcodeVocabulary) -> MarkovMatrix:
    return normalize(count_bigrams(linear_trace(program), vocabulary), "linear")


@dataclass(frozen=True)
class Augmentation:
    """Counts added for one control-flow site: (site position, target position, edges)."""
    site: int
    target: int
    edges: tuple[tuple[int, int], ...]


def cfg_augmentations(program: AssemblyProgram) -> list[Augmentation]:
    """Edges the control-flow-sensitive mode adds, as global trace positions.

    Each jump/call whose target resolves gets an edge from the branch to the
    instruction at the target.  When the target is a subroutine entry the
    branch's predecessor also gets that edge, and if the subroutine returns
    its last instruction is linked back to the branch's successor.
    """
    starts, pos = [], 0
    for sub in program.subroutines:
        starts.append(pos)
        pos += len(sub.body)
    n = pos
    returns: dict[str, bool] = {}
    out = []
    g = 0
    for sub in program.subroutines:
        for ins in sub.body:
            if ins.kind.is_branch and ins.target is not None:
                hit = resolve_target(program, ins.target)
                if hit is not None:
                    tsub, off = hit
                    if off < len(tsub.body):
                        si = program.symbol_index[tsub.name][0]
                        t = starts[si] + off
                        edges = [(g, t)]
                        if off == 0:
                            if g > 0:
                                edges.append((g - 1, t))
                            if tsub.name not in returns:
                                returns[tsub.name] = tsub.returns
                            if returns[tsub.name] and g + 1 < n:
                                edges.append((starts[si] + len(tsub.body) - 1, g + 1))
                        out.append(Augmentation(g, t, tuple(edges)))
            g += 1
    return out


def build_cfg_sensitive(program: AssemblyProgram, vocabulary: OpcodeVocabulary,
                        keep_fallthrough: bool = True) -> MarkovMatrix:
    """Linear bigrams plus one round of control-flow augmentation, then normalize.

    With ``keep_fallthrough=False`` the layout bigram from each augmented
    branch to its successor is removed.
    """
    trace = linear_trace(program)
    base = count_bigrams(trace, vocabulary)
    counts = base.counts.copy()
    idx = _indices(trace, vocabulary)
    for aug in cfg_augmentations(program):
        for a, b in aug.edges:
            counts[idx[a], idx[b]] += 1
        if not keep_fallthrough and aug.site + 1 < len(idx):
            counts[idx[aug.site], idx[aug.site + 1]] -= 1
    return normalize(TransitionCounts(vocabulary, counts, base.short_trace), "cfg")


def build(program: AssemblyProgram, vocabulary: OpcodeVocabulary, mode: str = "linear", **kw) -> MarkovMatrix:
    if mode == "linear":
        return build_linear(program, vocabulary)
    if mode == "cfg":
        return build_cfg_sensitive(program, vocabulary, **kw)
    raise ValueError(f"unknown matrix mode {mode!r}")


def flatten(matrix: MarkovMatrix) -> FeatureVector:
    return FeatureVector(f"MM:{matrix.mode}", matrix.probs.reshape(-1).copy())
