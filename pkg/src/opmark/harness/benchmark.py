"""Per-stage wall-clock timing with optional energy accounting.

An energy reader reports mean watts over a timed interval, or ``None`` when it
has no power data.  Joules are only ever derived as ``watts * seconds``.
"""
from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from ..asm_model import load_program
from ..graph_features import graph_features
from ..ica import ICAModel, fit as fit_ica, transform_matrix
from ..markov import build, build_vocabulary

log = logging.getLogger(__name__)

DEFAULT_BATCH = 20


class EnergyReader(Protocol):
    def start(self) -> None: ...

    def stop(self, seconds: float) -> Optional[float]:
        """Mean watts over the interval since ``start``, or ``None``."""


class NullReader:
    def start(self) -> None:
        pass

    def stop(self, seconds: float) -> Optional[float]:
        return None


@dataclass
class ConstantReader:
    watts: float

    def start(self) -> None:
        pass

    def stop(self, seconds: float) -> Optional[float]:
        return self.watts


class RaplReader:
    """Package energy from the Linux powercap counter, when readable."""

    def __init__(self, path: str = "/sys/class/powercap/intel-rapl:0/energy_uj"):
        self.path = Path(path)
        self._start: Optional[int] = None

    def available(self) -> bool:
        try:
            int(self.path.read_text())
            return True
        except (OSError, ValueError):
            return False

    def start(self) -> None:
        self._start = int(self.path.read_text()) if self.available() else None

    def stop(self, seconds: float) -> Optional[float]:
        if self._start is None or seconds <= 0 or not self.available():
            return None
        delta = int(self.path.read_text()) - self._start
        if delta < 0:  # counter wrapped
            return None
        return delta / 1e6 / seconds


@dataclass
class StageTiming:
    name: str
    seconds: float
    watts: Optional[float] = None
    joules: Optional[float] = None

    def __post_init__(self):
        if (self.watts is None) != (self.joules is None):
            raise ValueError("joules must be present exactly when watts is")

    @classmethod
    def measured(cls, name: str, seconds: float, watts: Optional[float]) -> "StageTiming":
        return cls(name, seconds, watts, None if watts is None else watts * seconds)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class BenchmarkReport:
    stages: list[StageTiming] = field(default_factory=list)
    batch_size: int = 0
    reader: str = "null"

    def stage(self, name: str) -> StageTiming:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def total_seconds(self) -> float:
        return sum(s.seconds for s in self.stages)

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "reader": self.reader,
                "stages": [s.to_dict() for s in self.stages], "total_seconds": self.total_seconds}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


class Stopwatch:
    """Times named stages with an injectable clock and energy reader."""

    def __init__(self, reader: Optional[EnergyReader] = None, clock: Callable[[], float] = time.perf_counter):
        self.reader = reader or NullReader()
        self.clock = clock
        self.report = BenchmarkReport(reader=type(self.reader).__name__)

    @contextmanager
    def stage(self, name: str):
        self.reader.start()
        t0 = self.clock()
        try:
            yield
        finally:
            seconds = self.clock() - t0
            self.report.stages.append(StageTiming.measured(name, seconds, self.reader.stop(seconds)))


def benchmark_extraction(files: Sequence, modes: Sequence[str] = ("linear", "cfg"), vocab_cap: int = 128,
                         spectrum_k: int = 16, ica_model: Optional[ICAModel] = None, ica_components: int = 34,
                         reader: Optional[EnergyReader] = None, clock: Callable[[], float] = time.perf_counter,
                         fmt: Optional[str] = None) -> BenchmarkReport:
    """Time parse, Markov build, graph features and ICA transform over one batch.

    Without a supplied ICA model one is fitted on the batch itself (timed as its
    own stage); its component count is capped by the batch size.
    """
    if not files:
        raise ValueError("empty batch")
    sw = Stopwatch(reader, clock)
    sw.report.batch_size = len(files)
    with sw.stage("parse"):
        programs = [load_program(f, fmt) for f in files]
    vocab = build_vocabulary(programs, vocab_cap)
    for mode in modes:
        with sw.stage(f"markov:{mode}"):
            matrices = [build(p, vocab, mode) for p in programs]
        with sw.stage(f"graph-features:{mode}"):
            for m in matrices:
                graph_features(m, spectrum_k)
        flat = np.stack([m.probs.reshape(-1) for m in matrices])
        model = ica_model
        if model is None and len(files) < 2:
            continue
        if model is None or model.fitted_dim != flat.shape[1]:
            with sw.stage(f"ica-fit:{mode}"):
                model = fit_ica(flat, min(ica_components, len(files) - 1), seed=0)
        with sw.stage(f"ica-transform:{mode}"):
            transform_matrix(model, flat)
    return sw.report


def repeat_variation(first: BenchmarkReport, second: BenchmarkReport) -> dict[str, float]:
    """Relative change per stage between two timings of the same batch (logged, not asserted)."""
    out = {}
    for s in first.stages:
        try:
            b = second.stage(s.name).seconds
        except KeyError:
            continue
        out[s.name] = (b - s.seconds) / s.seconds if s.seconds > 0 else 0.0
        log.info("stage %s: %.4fs then %.4fs", s.name, s.seconds, b)
    return out
