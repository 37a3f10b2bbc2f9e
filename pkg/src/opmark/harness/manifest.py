"""Dataset manifests: which file is which sample, in which split."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..asm_model import emit_flat, load_program
from ..obfuscation import ObfuscationConfig, obfuscate

TRAIN, TEST1, TEST2 = "train", "test1-unobf", "test2-obf"
SPLITS = (TRAIN, TEST1, TEST2)
OBF_SUFFIX = ".obf"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


class TooFewSamples(ManifestError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: str
    label: str
    split: Optional[str] = None
    record: Optional[str] = None  # obfuscation record file, test2 malware only
    parent: Optional[str] = None  # test1 sample an obfuscated entry derives from

    def __post_init__(self):
        if self.label not in ("benign", "malicious"):
            raise ManifestError(f"{self.sample_id}: bad label {self.label!r}")
        if self.split is not None and self.split not in SPLITS:
            raise ManifestError(f"{self.sample_id}: bad split {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int = 0
    config_hash: str = ""
    root: str = "."
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        problems = self.problems()
        if problems:
            raise ManifestError("; ".join(problems))

    @property
    def is_split(self) -> bool:
        return any(e.split is not None for e in self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def path_of(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.path

    def problems(self) -> list[str]:
        out = []
        splits = [e.split for e in self.entries]
        if any(s is None for s in splits) and any(s is not None for s in splits):
            out.append("some entries are split and some are not")
            return out
        if not self.is_split:
            ids = [e.sample_id for e in self.entries]
            if len(set(ids)) != len(ids):
                out.append("duplicate sample ids")
            return out
        train = self.split(TRAIN)
        t1, t2 = self.split(TEST1), self.split(TEST2)
        for name, part in ((TRAIN, train), (TEST1, t1), (TEST2, t2)):
            ids = [e.sample_id for e in part]
            if len(set(ids)) != len(ids):
                out.append(f"duplicate ids inside {name}")
        test_ids = {e.sample_id for e in t1 + t2} | {e.parent for e in t2 if e.parent}
        leaked = {e.sample_id for e in train} & test_ids
        if leaked:
            out.append(f"train overlaps test: {sorted(leaked)[:5]}")
        b1 = sorted((e.sample_id, e.path) for e in t1 if e.label == "benign")
        b2 = sorted((e.sample_id, e.path) for e in t2 if e.label == "benign")
        if b1 != b2:
            out.append("test1 and test2 benign entries differ")
        m1 = {e.sample_id for e in t1 if e.label == "malicious"}
        parents = [e.parent for e in t2 if e.label == "malicious"]
        if sorted(parents, key=str) != sorted(m1):
            out.append("test2 malware is not a one-to-one derivative of test1 malware")
        if any(e.parent is not None or e.record is not None for e in train + t1):
            out.append("lineage fields set outside test2")
        return out

    def with_entries(self, entries: Iterable[ManifestEntry], **changes) -> "DatasetManifest":
        return replace(self, entries=tuple(entries), **changes)

    def to_json(self) -> str:
        return json.dumps({"version": MANIFEST_VERSION, "seed": self.seed, "config_hash": self.config_hash,
                           "meta": self.meta, "entries": [asdict(e) for e in self.entries]}, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        if data.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {data.get('version')}")
        entries = [ManifestEntry(**e) for e in data["entries"]]
        return cls(tuple(entries), data.get("seed", 0), data.get("config_hash", ""), str(path.parent),
                   data.get("meta", {}))


def make_splits(manifest: DatasetManifest, train_fraction: float = 0.7, seed: int = 0,
                obfuscation: ObfuscationConfig = ObfuscationConfig(), config_hash: str = "") -> DatasetManifest:
    """Stratified split (floor per class), then obfuscate every test1 malware file into test2.

    Obfuscated files and their records are written under ``<root>/obf/``.
    """
    base = [replace(e, split=None, record=None, parent=None) for e in manifest.entries if e.parent is None]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    out: list[ManifestEntry] = []
    for label in ("benign", "malicious"):
        group = sorted((e for e in base if e.label == label), key=lambda e: e.sample_id)
        if len(group) < 2:
            raise TooFewSamples(f"{len(group)} {label} samples; need at least 2")
        order = rng.permutation(len(group))
        n_train = math.floor(train_fraction * len(group))
        for rank, i in enumerate(order):
            out.append(replace(group[i], split=TRAIN if rank < n_train else TEST1))
    out.sort(key=lambda e: (SPLITS.index(e.split), e.sample_id))
    root = Path(manifest.root)
    (root / "obf").mkdir(parents=True, exist_ok=True)
    test2: list[ManifestEntry] = []
    for k, e in enumerate(x for x in out if x.split == TEST1):
        if e.label == "benign":
            test2.append(replace(e, split=TEST2))
            continue
        program = load_program(root / e.path, "flat-asm")
        file_seed = int(np.random.SeedSequence([seed, 1, k]).generate_state(1)[0])
        obf, record = obfuscate(program, obfuscation, file_seed)
        path = f"obf/{e.sample_id}{OBF_SUFFIX}.asm"
        rec = f"obf/{e.sample_id}{OBF_SUFFIX}.record.json"
        (root / path).write_text(emit_flat(obf))
        (root / rec).write_text(record.to_json())
        test2.append(ManifestEntry(e.sample_id + OBF_SUFFIX, path, e.label, TEST2, rec, e.sample_id))
    meta = {**manifest.meta, "train_fraction": train_fraction, "split_seed": seed}
    return manifest.with_entries(out + test2, seed=seed, config_hash=config_hash, meta=meta)


def corpus_manifest(corpus, root, config_hash: str = "") -> DatasetManifest:
    entries = [ManifestEntry(s.sample_id, s.path, s.label) for s in corpus.samples]
    meta = {"corpus_seed": corpus.seed, "corpus_spec": asdict(corpus.spec)}
    return DatasetManifest(tuple(entries), corpus.seed, config_hash, str(root), meta)
