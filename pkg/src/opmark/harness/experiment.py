"""End-to-end runs: features for every split, repeated train/evaluate, reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..asm_model import AsmError, AssemblyProgram, OpcodeVocabulary, parse_disassembly
from ..detector import EvalReport, evaluate_arrays, fit_arrays
from ..graph_features import graph_features
from ..ica import fit as fit_ica, transform_matrix
from ..markov import build, build_vocabulary, split_schema
from .benchmark import EnergyReader, Stopwatch
from .config import ExperimentConfig
from .manifest import TEST1, TEST2, TRAIN, DatasetManifest, ManifestEntry

log = logging.getLogger(__name__)

CSV_COLUMNS = ("schema", "mode", "classifier", "accuracy_t1", "accuracy_t2", "fpr", "fnr_t1", "fnr_t2",
               "seconds", "joules")


class LeakageError(AssertionError):
    pass


@dataclass
class LoadedSample:
    entry: ManifestEntry
    program: AssemblyProgram
    digest: str


def load_samples(manifest: DatasetManifest) -> tuple[list[LoadedSample], list[tuple[str, str]]]:
    """Parse every manifest file once; unreadable files are excluded with a reason."""
    loaded, excluded = [], []
    seen: dict[str, LoadedSample] = {}
    for e in manifest.entries:
        key = e.path
        if key not in seen:
            try:
                raw = manifest.path_of(e).read_bytes()
                program = parse_disassembly(raw.decode(), "flat-asm", e.path)
                if len(program) == 0:
                    raise AsmError("no instructions")
            except (OSError, UnicodeDecodeError, AsmError) as exc:
                log.warning("excluding %s (%s): %s", e.sample_id, e.split, exc)
                excluded.append((e.sample_id, str(exc)))
                continue
            seen[key] = LoadedSample(e, program, hashlib.sha256(raw).hexdigest())
        loaded.append(LoadedSample(e, seen[key].program, seen[key].digest))
    return loaded, excluded


def assert_train_only(entries: Sequence[ManifestEntry], what: str) -> None:
    bad = [e.sample_id for e in entries if e.split != TRAIN]
    if bad:
        raise LeakageError(f"{what} would consume non-train samples {bad[:5]}")


def fit_vocabulary(samples: Sequence[LoadedSample], cap: int) -> OpcodeVocabulary:
    train = [s for s in samples if s.entry.split == TRAIN]
    assert_train_only([s.entry for s in train], "vocabulary construction")
    return build_vocabulary([s.program for s in train], cap)


class FeatureCache:
    """On-disk cache of per-file feature blocks keyed by (file hash, block, settings hash)."""

    def __init__(self, directory: Optional[str | Path]):
        self.dir = Path(directory) if directory else None
        self.hits = self.misses = 0
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.dir / f"{hashlib.sha256(key.encode()).hexdigest()[:32]}.npy"

    def get(self, key: str) -> Optional[np.ndarray]:
        if self.dir is None:
            return None
        p = self._path(key)
        if p.exists():
            self.hits += 1
            return np.load(p)
        self.misses += 1
        return None

    def put(self, key: str, values: np.ndarray) -> None:
        if self.dir is not None:
            np.save(self._path(key), values)


def _settings_hash(vocab: OpcodeVocabulary, config: ExperimentConfig) -> str:
    text = json.dumps([vocab.tokens, config.spectrum_k, config.aggregates, config.keep_fallthrough])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _extract_one(program: AssemblyProgram, vocab: OpcodeVocabulary, mode: str, spectrum_k: int,
                 aggregates: Sequence[str], keep_fallthrough: bool) -> tuple[np.ndarray, np.ndarray]:
    kw = {"keep_fallthrough": keep_fallthrough} if mode == "cfg" else {}
    matrix = build(program, vocab, mode, **kw)
    return matrix.probs.reshape(-1).copy(), graph_features(matrix, spectrum_k, aggregates).values


def _extract_star(args):
    return _extract_one(*args)


def extract_blocks(samples: Sequence[LoadedSample], vocab: OpcodeVocabulary, config: ExperimentConfig,
                   mode: str, cache: Optional[FeatureCache] = None, workers: int = 1) -> dict[str, np.ndarray]:
    """Row-aligned ``{"MM": ..., "GF": ...}`` arrays for one matrix mode."""
    cache = cache or FeatureCache(None)
    settings = _settings_hash(vocab, config)
    mm: list[Optional[np.ndarray]] = [None] * len(samples)
    gf: list[Optional[np.ndarray]] = [None] * len(samples)
    todo = []
    for i, s in enumerate(samples):
        a = cache.get(f"{s.digest}|MM:{mode}|{settings}")
        b = cache.get(f"{s.digest}|GF:{mode}|{settings}")
        if a is None or b is None:
            todo.append(i)
        else:
            mm[i], gf[i] = a, b
    jobs = [(samples[i].program, vocab, mode, config.spectrum_k, config.aggregates, config.keep_fallthrough)
            for i in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_extract_star, jobs, chunksize=16))
    else:
        results = [_extract_star(j) for j in jobs]
    for i, (a, b) in zip(todo, results):
        mm[i], gf[i] = a, b
        cache.put(f"{samples[i].digest}|MM:{mode}|{settings}", a)
        cache.put(f"{samples[i].digest}|GF:{mode}|{settings}", b)
    if cache.dir is not None:
        log.info("feature cache (%s): %d hits, %d misses", mode, cache.hits, cache.misses)
    return {"MM": np.stack(mm), "GF": np.stack(gf)}


def run_seeds(config: ExperimentConfig) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(config.runs)]


@dataclass
class RowStats:
    schema: str
    mode: str
    classifier: str
    runs: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict:
        out = {"schema": self.schema, "mode": self.mode, "classifier": self.classifier, "runs": len(self.runs)}
        for key in ("accuracy_t1", "accuracy_t2", "fpr", "fnr_t1", "fnr_t2", "seconds"):
            vals = np.array([r[key] for r in self.runs])
            out[key] = float(vals.mean())
            out[key + "_std"] = float(vals.std())
        energy = [r["joules"] for r in self.runs if r.get("joules") is not None]
        if len(energy) == len(self.runs) and self.runs:
            total_s = sum(r["seconds"] for r in self.runs)
            watts = sum(energy) / total_s if total_s > 0 else 0.0
            out["watts"] = watts
            out["joules"] = watts * out["seconds"]
        else:
            out["watts"] = out["joules"] = None
        return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    run_seeds: list[int]
    benchmark: dict
    excluded: list[tuple[str, str]]
    counts: dict
    per_run: list[dict] = field(default_factory=list, repr=False)

    def row(self, schema: str, mode: str, classifier: str) -> dict:
        for r in self.rows:
            if (r["schema"], r["mode"], r["classifier"]) == (schema, mode, classifier):
                return r
        raise KeyError((schema, mode, classifier))

    def best(self) -> dict:
        return max(self.rows, key=lambda r: (r["accuracy_t1"], r["accuracy_t2"]))

    def to_json(self) -> str:
        return json.dumps({"config": self.config.as_dict(), "config_hash": self.config.digest(),
                           "run_seeds": self.run_seeds, "counts": self.counts, "excluded": self.excluded,
                           "rows": self.rows, "per_run": self.per_run, "benchmark": self.benchmark}, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in CSV_COLUMNS})
        return buf.getvalue()

    def save(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())
        return out / "report.json", out / "report.csv"


def _design(blocks: dict[str, np.ndarray], names: Sequence[str], ica_values: Optional[np.ndarray]) -> np.ndarray:
    parts = []
    for b in names:
        parts.append(ica_values if b == "ICA-MM" else blocks[b])
    return np.hstack(parts)


def run_experiment(config: ExperimentConfig, manifest: DatasetManifest, reader: Optional[EnergyReader] = None,
                   clock: Callable[[], float] = time.perf_counter, cache_dir: Optional[str] = None,
                   workers: int = 1, progress: Optional[Callable[[str], None]] = None) -> ExperimentResult:
    if not manifest.is_split:
        raise ValueError("manifest has no split assignment; run make_splits first")
    sw = Stopwatch(reader, clock)
    with sw.stage("parse"):
        samples, excluded = load_samples(manifest)
    splits = np.array([s.entry.split for s in samples])
    labels = np.array([1 if s.entry.label == "malicious" else 0 for s in samples])
    ids = [s.entry.sample_id for s in samples]
    rows_of = {name: np.flatnonzero(splits == name) for name in (TRAIN, TEST1, TEST2)}
    for name, r in rows_of.items():
        if len(r) == 0:
            raise ValueError(f"split {name} is empty")
    train_rows = rows_of[TRAIN]

    with sw.stage("vocabulary"):
        vocab = fit_vocabulary(samples, config.vocab_cap)
    cache = FeatureCache(cache_dir or config.cache_dir or None)
    features = {}
    for mode in config.modes:
        with sw.stage(f"features:{mode}"):
            features[mode] = extract_blocks(samples, vocab, config, mode, cache, workers)

    needs_ica = any("ICA-MM" in split_schema(s)[0] for s in config.schemas)
    stats = {(s, m, c): RowStats(s, m, c) for s in config.schemas for m in config.modes for c in config.classifiers}
    seeds = run_seeds(config)
    per_run = []
    for run, seed in enumerate(seeds):
        ica_values = {}
        if needs_ica:
            assert_train_only([samples[i].entry for i in train_rows], "ICA fit")
            for mode in config.modes:
                with sw.stage(f"ica-fit:{mode}"):
                    model = fit_ica(features[mode]["MM"][train_rows], config.ica_components, seed=seed)
                    ica_values[mode] = transform_matrix(model, features[mode]["MM"])
        for (schema, mode, clf), st in stats.items():
            X = _design(features[mode], split_schema(schema)[0], ica_values.get(mode))
            hp = config.hyperparameters(clf)
            sw.reader.start()
            t0 = sw.clock()
            model = fit_arrays(X[train_rows], labels[train_rows], hp, seed)
            r1 = evaluate_arrays(model, X[rows_of[TEST1]], labels[rows_of[TEST1]], [ids[i] for i in rows_of[TEST1]])
            r2 = evaluate_arrays(model, X[rows_of[TEST2]], labels[rows_of[TEST2]], [ids[i] for i in rows_of[TEST2]])
            seconds = sw.clock() - t0
            watts = sw.reader.stop(seconds)
            if r1.false_positive_rate != r2.false_positive_rate:
                raise AssertionError(f"FPR differs between test sets for {schema}:{mode}:{clf} run {run}")
            rec = {"run": run, "seed": seed, "accuracy_t1": r1.accuracy, "accuracy_t2": r2.accuracy,
                   "fpr": r1.false_positive_rate, "fpr_t2": r2.false_positive_rate,
                   "fnr_t1": r1.false_negative_rate, "fnr_t2": r2.false_negative_rate, "seconds": seconds,
                   "joules": None if watts is None else watts * seconds}
            st.runs.append(rec)
            per_run.append({"schema": schema, "mode": mode, "classifier": clf, **rec})
            if progress:
                progress(f"run {run + 1}/{len(seeds)} {schema}:{mode}:{clf} "
                         f"t1={r1.accuracy:.3f} t2={r2.accuracy:.3f}")
    rows = [st.aggregate() for st in stats.values()]
    counts = {name: int(len(r)) for name, r in rows_of.items()}
    counts["vocabulary"] = len(vocab)
    return ExperimentResult(config, rows, seeds, sw.report.to_dict(), excluded, counts, per_run)


def feature_matrix(samples: Sequence[LoadedSample], vocab: OpcodeVocabulary, config: ExperimentConfig,
                   schema: str, mode: str, ica_model=None) -> np.ndarray:
    """Design matrix for one schema; ``ICA-MM`` blocks need a fitted ``ica_model``."""
    names = split_schema(schema)[0]
    blocks = extract_blocks(samples, vocab, config, mode)
    ica_values = None
    if "ICA-MM" in names:
        if ica_model is None:
            raise ValueError(f"schema {schema} needs an ICA model")
        ica_values = transform_matrix(ica_model, blocks["MM"])
    return _design(blocks, names, ica_values)
