"""Generate a synthetic corpus, split it, and run the schema x mode x classifier sweep.

    python3 scripts/scaled_detection.py --out runs/analogue --runs 5
"""
import argparse
import logging
from pathlib import Path

from opmark.harness import (
    CorpusSpec, corpus_manifest, expected_total_variation, generate_corpus, load_config, make_splits, run_experiment,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/analogue")
    ap.add_argument("--benign", type=int, default=400)
    ap.add_argument("--malicious", type=int, default=400)
    ap.add_argument("--separation", type=float, default=CorpusSpec.separation)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--config", help="experiment config file (key = value)")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    spec = CorpusSpec(args.benign, args.malicious, separation=args.separation)
    print(f"corpus: {spec.benign}+{spec.malicious}, separation {spec.separation}, "
          f"expected opcode total variation {expected_total_variation(spec):.3f}")
    corpus = generate_corpus(spec, args.seed)
    corpus.write(out / "corpus")
    config = load_config(args.config).replace(runs=args.runs, seed=args.seed)
    manifest = make_splits(corpus_manifest(corpus, out / "corpus"), config.train_fraction, args.seed,
                           config.obfuscation(), config.digest())
    manifest.save(out / "corpus" / "manifest.json")

    result = run_experiment(config, manifest, cache_dir=str(out / "cache"), workers=args.workers)
    result.save(out)
    print(f"\n{'schema':<11}{'classifier':<18}{'mode':<8}{'test1':>8}{'test2':>8}{'fpr':>8}")
    for r in sorted(result.rows, key=lambda r: (r["schema"], r["classifier"], r["mode"])):
        print(f"{r['schema']:<11}{r['classifier']:<18}{r['mode']:<8}"
              f"{r['accuracy_t1']:>8.4f}{r['accuracy_t2']:>8.4f}{r['fpr']:>8.4f}")
    best = result.best()
    print(f"\nbest: {best['schema']}:{best['mode']}:{best['classifier']}; reports in {out}")


if __name__ == "__main__":
    main()
