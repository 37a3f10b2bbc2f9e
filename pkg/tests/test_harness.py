import json
import math
from pathlib import Path
from dataclasses import replace

import numpy as np
import pytest

from opmark.asm_model import parse_disassembly
from opmark.harness.benchmark import (
    BenchmarkReport, ConstantReader, NullReader, RaplReader, StageTiming, Stopwatch, benchmark_extraction,
)
from opmark.harness.cli import main
from opmark.harness.config import ConfigError, ExperimentConfig, load_config, parse_config
from opmark.harness.corpus import (
    CorpusSpec, InvalidSpec, class_weights, expected_total_variation, expected_unigrams, generate_corpus,
    generate_program,
)
from opmark.harness.experiment import (
    CSV_COLUMNS, LeakageError, assert_train_only, fit_vocabulary, load_samples, run_experiment,
)
from opmark.harness.manifest import (
    TEST1, TEST2, TRAIN, DatasetManifest, ManifestEntry, ManifestError, TooFewSamples, make_splits,
)
from opmark.obfuscation import ObfuscationRecord, check_record

TINY = ExperimentConfig(schemas=("MM", "ICA-MM", "GF"), runs=1, ica_components=3, forest_trees=10,
                        boost_trees=10)


class FakeClock:
    def __init__(self, step):
        self.t, self.step = 0.0, step

    def __call__(self):
        self.t += self.step
        return self.t


# --- config -------------------------------------------------------------------

def test_config_round_trip():
    cfg = ExperimentConfig(runs=3, modes=("cfg",), aggregates=("mean", "max"))
    assert parse_config(cfg.to_text(), environ={}) == cfg
    assert parse_config(cfg.to_text(), environ={}).digest() == cfg.digest()


def test_config_env_overrides_file():
    cfg = parse_config("version = 1\nruns = 4  # comment\n", environ={"OPMARK_RUNS": "7", "OPMARK_SEED": "3"})
    assert (cfg.runs, cfg.seed) == (7, 3)
    assert load_config(environ={}).runs == 50


@pytest.mark.parametrize("text", [
    "runs = 3\n", "version = 2\n", "version = 1\nbogus = 1\n", "version = 1\nruns = x\n",
    "version = 1\nruns = 0\n", "version = 1\nschemas = MM:cfg\n", "version = 1\nmodes = dynamic\n",
    "version = 1\nclassifiers = svm\n", "version = 1\nkeep_fallthrough = maybe\n", "version = 1\nnot a pair\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text, environ={})


def test_classifier_aliases():
    cfg = ExperimentConfig(classifiers=("rf", "gb"))
    assert cfg.classifiers == ("random-forest", "gradient-boosted")
    assert cfg.hyperparameters("gb").n_trees == 200


# --- corpus -------------------------------------------------------------------

def test_corpus_is_deterministic():
    spec = CorpusSpec(benign=5, malicious=5)
    a, b = generate_corpus(spec, 9), generate_corpus(spec, 9)
    assert [s.text for s in a.samples] == [s.text for s in b.samples]
    assert [s.text for s in generate_corpus(spec, 10).samples] != [s.text for s in a.samples]


def test_corpus_class_profiles_differ():
    assert expected_total_variation(CorpusSpec()) >= 0.2
    assert expected_total_variation(CorpusSpec(separation=0.0, min_total_variation=0.0)) == pytest.approx(0.0, abs=1e-12)
    for label in ("benign", "malicious"):
        for w in class_weights(label, 0.35):
            assert math.isclose(sum(w.values()), 1.0)
        assert math.isclose(sum(expected_unigrams(label, CorpusSpec()).values()), 1.0)


def test_empirical_unigrams_track_expected():
    spec = CorpusSpec(benign=0, malicious=150)
    counts = {}
    for s in generate_corpus(spec, 1).samples:
        for m, c in parse_disassembly(s.text).mnemonic_counts().items():
            counts[m] = counts.get(m, 0) + c
    total = sum(counts.values())
    expected = expected_unigrams("malicious", spec)
    tv = 0.5 * sum(abs(counts.get(k, 0) / total - expected.get(k, 0.0)) for k in set(counts) | set(expected))
    assert tv < 0.05


def test_invalid_specs():
    for spec in (CorpusSpec(benign=-1), CorpusSpec(subroutines=(0, 2)), CorpusSpec(separation=1.5),
                 CorpusSpec(separation=0.05)):
        with pytest.raises(InvalidSpec):
            spec.validate()
    with pytest.raises(InvalidSpec):
        generate_program("unknown", CorpusSpec(), np.random.default_rng(0))


# --- splits -------------------------------------------------------------------

def test_small_split_counts(small_split):
    counts = {s: len(small_split.split(s)) for s in (TRAIN, TEST1, TEST2)}
    assert counts == {TRAIN: 14, TEST1: 6, TEST2: 6}
    for label in ("benign", "malicious"):
        assert sum(e.label == label for e in small_split.split(TRAIN)) == 7


def test_split_invariants_and_records(small_split):
    root = small_split.root
    assert small_split.problems() == []
    reloaded = DatasetManifest.load(f"{root}/manifest.json")
    assert reloaded.entries == small_split.entries
    for e in small_split.split(TEST2):
        if e.label == "malicious":
            parent = next(x for x in small_split.split(TEST1) if x.sample_id == e.parent)
            rec = ObfuscationRecord.from_json((Path(root) / e.record).read_text())
            prog = parse_disassembly(small_split.path_of(parent).read_text())
            assert check_record(prog, rec) == []


def test_large_class_floor(tmp_path):
    mal = generate_corpus(CorpusSpec(benign=0, malicious=4), 0)
    mal.write(tmp_path)
    entries = [ManifestEntry(f"b{i:04d}", f"benign/b{i:04d}.asm", "benign") for i in range(2407)]
    entries += [ManifestEntry(s.sample_id, s.path, s.label) for s in mal.samples]
    split = make_splits(DatasetManifest(tuple(entries), root=str(tmp_path)), 0.7, seed=1)
    train_benign = [e for e in split.split(TRAIN) if e.label == "benign"]
    assert len(train_benign) == 1684 == math.floor(0.7 * 2407)


def test_split_is_seed_deterministic(tmp_path):
    corpus = generate_corpus(CorpusSpec(benign=6, malicious=6), 2)
    corpus.write(tmp_path)
    from opmark.harness.manifest import corpus_manifest
    base = corpus_manifest(corpus, tmp_path)
    a = make_splits(base, 0.5, seed=8)
    b = make_splits(base, 0.5, seed=8)
    assert a.to_json() == b.to_json()


def test_manifest_rejects_leaks_and_mismatches(small_split):
    train = small_split.split(TRAIN)[0]
    leaked = replace(train, split=TEST1)
    with pytest.raises(ManifestError):
        small_split.with_entries(small_split.entries + (leaked,))
    no_benign = [e for e in small_split.entries if not (e.split == TEST2 and e.label == "benign")]
    with pytest.raises(ManifestError):
        small_split.with_entries(no_benign)
    with pytest.raises(TooFewSamples):
        make_splits(DatasetManifest((ManifestEntry("b0", "x", "benign"),)), 0.7)
    with pytest.raises(ManifestError):
        ManifestEntry("x", "x", "grey")


# --- benchmark ----------------------------------------------------------------

def test_null_reader_reports_time_only():
    sw = Stopwatch(NullReader(), FakeClock(2.0))
    with sw.stage("parse"):
        pass
    d = sw.report.to_dict()["stages"][0]
    assert d == {"name": "parse", "seconds": 2.0}


def test_constant_reader_energy():
    sw = Stopwatch(ConstantReader(5.0), FakeClock(10.0))
    with sw.stage("features"):
        pass
    s = sw.report.stage("features")
    assert (s.seconds, s.watts, s.joules) == (10.0, 5.0, 50.0)


def test_stage_timing_invariant():
    with pytest.raises(ValueError):
        StageTiming("x", 1.0, watts=2.0)
    assert RaplReader("/nonexistent/energy").stop(1.0) is None


def test_benchmark_extraction_stages(small_split):
    files = [small_split.path_of(e) for e in small_split.entries[:6]]
    report = benchmark_extraction(files, ica_components=3, reader=ConstantReader(2.0))
    names = [s.name for s in report.stages]
    assert names[0] == "parse" and "ica-transform:cfg" in names and report.batch_size == 6
    assert all(s.joules == s.watts * s.seconds for s in report.stages)
    assert isinstance(BenchmarkReport().to_json(), str)


# --- experiment ---------------------------------------------------------------

def test_experiment_single_run(small_split, tmp_path):
    result = run_experiment(TINY, small_split, ConstantReader(3.0), cache_dir=str(tmp_path / "cache"))
    assert len(result.rows) == 3 * 2 * 2
    assert {r["mode"] for r in result.rows} == {"linear", "cfg"}
    for r in result.rows:
        assert r["runs"] == 1 and r["accuracy_t1_std"] == 0.0
        assert r["joules"] == pytest.approx(3.0 * r["seconds"])
    js, cs = result.save(tmp_path / "out")
    assert cs.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert json.loads(js.read_text())["counts"][TRAIN] == 14
    again = run_experiment(TINY, small_split, cache_dir=str(tmp_path / "cache"))
    assert [r["accuracy_t2"] for r in again.rows] == [r["accuracy_t2"] for r in result.rows]
    assert all(r["joules"] is None for r in again.rows)


def test_leakage_guard(small_split):
    samples, _ = load_samples(small_split)
    with pytest.raises(LeakageError):
        assert_train_only([s.entry for s in samples], "vocabulary")
    vocab = fit_vocabulary(samples, 128)
    train_mnemonics = set()
    for s in samples:
        if s.entry.split == TRAIN:
            train_mnemonics |= set(s.program.mnemonic_counts())
    assert set(vocab.tokens[1:]) <= train_mnemonics


def test_unreadable_file_is_excluded(small_split, tmp_path):
    bad = small_split.with_entries(
        [replace(e, path="missing.asm") if e.sample_id == small_split.split(TRAIN)[0].sample_id else e
         for e in small_split.entries])
    samples, excluded = load_samples(bad)
    assert len(excluded) == 1 and len(samples) == len(small_split.entries) - 1


# --- command line -----------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    root = tmp_path / "corpus"
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(TINY.to_text())
    assert main(["gen-corpus", "--out", str(root), "--benign", "8", "--malicious", "8", "--seed", "1"]) == 0
    m = str(root / "manifest.json")
    assert main(["split", "--manifest", m, "--seed", "2", "--config", str(cfg)]) == 0
    assert main(["train", "--manifest", m, "--schema", "ICA-MM+GF", "--classifier", "rf",
                 "--out", str(tmp_path / "model"), "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert main(["eval", "--manifest", m, "--model", str(tmp_path / "model"), "--out", str(tmp_path / "rep")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary[TEST1]["false_positive_rate"] == summary[TEST2]["false_positive_rate"]
    assert main(["experiment", "--manifest", m, "--config", str(cfg), "--out", str(tmp_path / "exp"),
                 "--watts", "4"]) == 0
    assert (tmp_path / "exp" / "report.csv").exists()
    src = next(root.glob("malicious/*.asm"))
    assert main(["obfuscate", "--in", str(src), "--out", str(tmp_path / "o.asm"), "--seed", "3",
                 "--passes", "2", "--rates", "dead=0.5", "--record", str(tmp_path / "o.json")]) == 0
    assert len(ObfuscationRecord.from_json((tmp_path / "o.json").read_text()).passes) == 2
    assert main(["extract", "--in", str(src), "--mode", "cfg", "--schema", "MM+GF", "--vocab-manifest", m,
                 "--out", str(tmp_path / "f.json"), "--matrix-out", str(tmp_path / "m.omk")]) == 0
    assert json.loads((tmp_path / "f.json").read_text())["schema"] == "MM+GF:cfg"
    assert main(["benchmark", "--manifest", m, "--batch", "5", "--config", str(cfg),
                 "--out", str(tmp_path / "b.json")]) == 0


def test_cli_reports_errors(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OPMARK_RUNS", "0")
    assert main(["experiment", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path)]) == 2
    assert "runs" in capsys.readouterr().err
