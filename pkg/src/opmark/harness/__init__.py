"""Experiment orchestration: corpus, manifests, runs, benchmarks and the CLI."""
from .benchmark import BenchmarkReport, ConstantReader, NullReader, RaplReader, StageTiming, benchmark_extraction
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .corpus import CorpusSpec, InvalidSpec, expected_total_variation, generate_corpus
from .experiment import ExperimentResult, run_experiment
from .manifest import DatasetManifest, ManifestEntry, ManifestError, TooFewSamples, corpus_manifest, make_splits
