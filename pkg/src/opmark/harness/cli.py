"""Command-line entry point: ``opmark <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..container import ContainerError
from ..asm_model import AsmError, OpcodeVocabulary, emit_flat, load_program
from ..detector import TreeEnsembleModel, evaluate_arrays, fit_arrays
from ..graph_features import graph_features
from ..ica import ICAModel, fit as fit_ica, transform
from ..markov import MODES, build, build_vocabulary, flatten, split_schema
from ..obfuscation import ALL_KINDS, ObfuscationConfig, obfuscate
from .benchmark import DEFAULT_BATCH, ConstantReader, NullReader, RaplReader, benchmark_extraction, repeat_variation
from .config import ConfigError, load_config, parse_config
from .corpus import CorpusSpec, InvalidSpec, expected_total_variation, generate_corpus
from .experiment import assert_train_only, feature_matrix, fit_vocabulary, load_samples, run_experiment
from .manifest import TEST1, TEST2, TRAIN, DatasetManifest, ManifestError, corpus_manifest, make_splits

log = logging.getLogger("opmark")


def _reader(args):
    if getattr(args, "watts", None) is not None:
        return ConstantReader(args.watts)
    if getattr(args, "rapl", False):
        r = RaplReader()
        if r.available():
            return r
        log.warning("RAPL counter unreadable; reporting time only")
    return NullReader()


def _rates(text: str | None) -> dict:
    out = {}
    if not text:
        return out
    names = {"dead": "dead_code_rate", "subst": "substitution_rate", "mix": "mixing_rate"}
    for part in text.split(","):
        key, _, value = part.partition("=")
        if key.strip() not in names:
            raise SystemExit(f"unknown rate {key!r}; expected dead, subst or mix")
        out[names[key.strip()]] = float(value)
    return out


def cmd_gen_corpus(args) -> int:
    spec = CorpusSpec(args.benign, args.malicious, separation=args.separation, min_total_variation=args.min_tv)
    corpus = generate_corpus(spec, args.seed)
    corpus.write(args.out)
    manifest = corpus_manifest(corpus, args.out)
    manifest.save(Path(args.out) / "manifest.json")
    print(f"wrote {len(corpus.samples)} files to {args.out}; "
          f"expected opcode total variation {expected_total_variation(spec):.3f}")
    return 0


def cmd_split(args) -> int:
    config = load_config(args.config)
    manifest = DatasetManifest.load(args.manifest)
    split = make_splits(manifest, args.train_fraction or config.train_fraction, args.seed,
                        config.obfuscation(), config.digest())
    out = Path(args.out or args.manifest)
    if out.resolve().parent != Path(manifest.root).resolve():
        raise SystemExit("split manifest must live next to the corpus it indexes")
    split.save(out)
    counts = {s: len(split.split(s)) for s in (TRAIN, TEST1, TEST2)}
    print(json.dumps(counts))
    return 0


def cmd_extract(args) -> int:
    config = load_config(args.config)
    program = load_program(args.input, args.format)
    if args.vocab_manifest:
        samples, _ = load_samples(DatasetManifest.load(args.vocab_manifest))
        vocab = fit_vocabulary(samples, config.vocab_cap)
    else:
        vocab = build_vocabulary([program], config.vocab_cap)
    matrix = build(program, vocab, args.mode)
    if args.matrix_out:
        matrix.save(args.matrix_out)
    vectors = []
    for block in split_schema(args.schema)[0]:
        if block == "MM":
            vectors.append(flatten(matrix))
        elif block == "GF":
            vectors.append(graph_features(matrix, config.spectrum_k, config.aggregates))
        else:
            if not args.ica:
                raise SystemExit("ICA-MM needs --ica MODEL")
            vectors.append(transform(ICAModel.load(args.ica), flatten(matrix)))
    fv = vectors[0]
    for v in vectors[1:]:
        fv = fv.concat(v)
    payload = json.dumps({"schema": fv.schema, "tokens": list(vocab.tokens), "values": fv.values.tolist()})
    if args.out:
        Path(args.out).write_text(payload)
    else:
        print(payload)
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    manifest = DatasetManifest.load(args.manifest)
    samples, _ = load_samples(manifest)
    train = [s for s in samples if s.entry.split == TRAIN]
    assert_train_only([s.entry for s in train], "training")
    vocab = fit_vocabulary(samples, config.vocab_cap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ica = None
    if "ICA-MM" in split_schema(args.schema)[0]:
        mm = feature_matrix(train, vocab, config, "MM", args.mode)
        ica = fit_ica(mm, config.ica_components, seed=args.seed)
        ica.save(out / "ica.oic")
    X = feature_matrix(train, vocab, config, args.schema, args.mode, ica)
    y = np.array([1 if s.entry.label == "malicious" else 0 for s in train])
    model = fit_arrays(X, y, config.hyperparameters(args.classifier), args.seed)
    model.save(out / "model.ote")
    (out / "pipeline.json").write_text(json.dumps({
        "schema": args.schema, "mode": args.mode, "tokens": list(vocab.tokens), "config": config.to_text(),
        "ica": ica is not None, "seed": args.seed}, indent=1))
    print(f"trained {model.kind} on {len(train)} samples -> {out}")
    return 0


def cmd_eval(args) -> int:
    model_dir = Path(args.model)
    pipe = json.loads((model_dir / "pipeline.json").read_text())
    config = parse_config(pipe["config"], environ={})
    vocab = OpcodeVocabulary(tuple(pipe["tokens"]))
    model = TreeEnsembleModel.load(model_dir / "model.ote")
    ica = ICAModel.load(model_dir / "ica.oic") if pipe["ica"] else None
    samples, _ = load_samples(DatasetManifest.load(args.manifest))
    out = {}
    for split in (TEST1, TEST2):
        part = [s for s in samples if s.entry.split == split]
        X = feature_matrix(part, vocab, config, pipe["schema"], pipe["mode"], ica)
        y = np.array([1 if s.entry.label == "malicious" else 0 for s in part])
        report = evaluate_arrays(model, X, y, [s.entry.sample_id for s in part])
        out[split] = report
        if args.out:
            Path(f"{args.out}.{split}.json").write_text(report.to_json())
            Path(f"{args.out}.{split}.csv").write_text(report.csv_row())
    print(json.dumps({k: v.summary() for k, v in out.items()}, indent=1))
    return 0


def cmd_experiment(args) -> int:
    config = load_config(args.config)
    if args.runs:
        config = config.replace(runs=args.runs)
    manifest = DatasetManifest.load(args.manifest)
    result = run_experiment(config, manifest, _reader(args), cache_dir=args.cache, workers=args.workers,
                            progress=(lambda m: log.info(m)))
    js, cs = result.save(args.out)
    best = result.best()
    print(f"best: {best['schema']}:{best['mode']}:{best['classifier']} "
          f"test1={best['accuracy_t1']:.4f} test2={best['accuracy_t2']:.4f}; reports in {js} and {cs}")
    return 0


def cmd_obfuscate(args) -> int:
    program = load_program(args.input, args.format)
    passes = None if args.passes in (None, "random") else int(args.passes)
    config = ObfuscationConfig(ALL_KINDS, passes, **_rates(args.rates))
    out, record = obfuscate(program, config, args.seed)
    Path(args.output).write_text(emit_flat(out))
    Path(args.record).write_text(record.to_json())
    print(f"{len(program)} -> {len(out)} instructions; "
          f"passes: {', '.join(p.kind.value + ('' if p.status == 'applied' else ' (skipped)') for p in record.passes)}")
    return 0


def cmd_benchmark(args) -> int:
    config = load_config(args.config)
    files = list(args.files or [])
    if args.manifest:
        m = DatasetManifest.load(args.manifest)
        files += [m.path_of(e) for e in m.entries]
    files = files[: args.batch]
    if not files:
        raise SystemExit("no input files")
    reports = [benchmark_extraction(files, config.modes, config.vocab_cap, config.spectrum_k,
                                    ica_components=config.ica_components, reader=_reader(args))
               for _ in range(args.repeat)]
    payload = {"runs": [r.to_dict() for r in reports]}
    if len(reports) > 1:
        payload["variation"] = repeat_variation(reports[0], reports[1])
    text = json.dumps(payload, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opmark", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic flat-asm corpus and its manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--benign", type=int, default=400)
    g.add_argument("--malicious", type=int, default=400)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--separation", type=float, default=CorpusSpec.separation)
    g.add_argument("--min-tv", type=float, default=CorpusSpec.min_total_variation)
    g.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("split", help="assign train/test1 and build the obfuscated test2 set")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", help="output manifest (default: overwrite input)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-fraction", type=float)
    s.add_argument("--config")
    s.set_defaults(func=cmd_split)

    e = sub.add_parser("extract", help="features for one disassembly file")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--format", choices=("flat-asm", "objdump-att", "objdump-intel"))
    e.add_argument("--mode", choices=MODES, default="linear")
    e.add_argument("--schema", default="MM", help="blocks joined by '+', e.g. MM+GF")
    e.add_argument("--vocab-manifest", help="build the vocabulary from this manifest's train split")
    e.add_argument("--ica", help="ICA model (OIC1) for ICA-MM blocks")
    e.add_argument("--matrix-out", help="also save the Markov matrix (OMK1)")
    e.add_argument("--out")
    e.add_argument("--config")
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train one classifier on a split manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--schema", default="MM")
    t.add_argument("--mode", choices=MODES, default="cfg")
    t.add_argument("--classifier", choices=("rf", "gb", "random-forest", "gradient-boosted"), default="gb")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="model directory")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a trained model on test1 and test2")
    v.add_argument("--manifest", required=True)
    v.add_argument("--model", required=True, help="directory written by 'train'")
    v.add_argument("--out", help="report path prefix")
    v.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="sweep schemas x modes x classifiers over repeated runs")
    x.add_argument("--manifest", required=True)
    x.add_argument("--config")
    x.add_argument("--out", required=True)
    x.add_argument("--runs", type=int)
    x.add_argument("--cache")
    x.add_argument("--workers", type=int, default=1)
    x.add_argument("--watts", type=float, help="constant power reading for energy figures")
    x.add_argument("--rapl", action="store_true", help="read package energy from powercap")
    x.set_defaults(func=cmd_experiment)

    o = sub.add_parser("obfuscate", help="obfuscate one flat-asm file and write its record")
    o.add_argument("--in", dest="input", required=True)
    o.add_argument("--out", dest="output", required=True)
    o.add_argument("--seed", type=int, required=True)
    o.add_argument("--passes", default="random", help="1..4 or 'random'")
    o.add_argument("--rates", help="e.g. dead=0.05,subst=0.3,mix=0.2")
    o.add_argument("--record", required=True)
    o.add_argument("--format", choices=("flat-asm", "objdump-att", "objdump-intel"))
    o.set_defaults(func=cmd_obfuscate)

    b = sub.add_parser("benchmark", help="time (and optionally meter) feature extraction on a batch")
    b.add_argument("files", nargs="*")
    b.add_argument("--manifest")
    b.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    b.add_argument("--repeat", type=int, default=1)
    b.add_argument("--watts", type=float)
    b.add_argument("--rapl", action="store_true")
    b.add_argument("--out")
    b.add_argument("--config")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, InvalidSpec, AsmError, ContainerError, FileNotFoundError) as exc:
        print(f"opmark {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
