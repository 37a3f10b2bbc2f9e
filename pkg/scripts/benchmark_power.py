"""Time feature extraction on a batch of files, with energy if a power source is given.

Without --watts or a readable RAPL counter the report holds seconds only.
"""
import argparse
import json
import tempfile
from pathlib import Path

from opmark.harness.benchmark import (
    DEFAULT_BATCH, ConstantReader, NullReader, RaplReader, benchmark_extraction, repeat_variation,
)
from opmark.harness.corpus import CorpusSpec, generate_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("files", nargs="*", help="flat-asm or objdump files (default: a fresh synthetic batch)")
    ap.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    ap.add_argument("--repeat", type=int, default=2)
    ap.add_argument("--watts", type=float, help="assume a constant power draw")
    ap.add_argument("--rapl", action="store_true", help="read the Linux powercap energy counter")
    ap.add_argument("--ica-components", type=int, default=34)
    ap.add_argument("--out")
    args = ap.parse_args()

    reader = NullReader()
    if args.watts is not None:
        reader = ConstantReader(args.watts)
    elif args.rapl and RaplReader().available():
        reader = RaplReader()

    with tempfile.TemporaryDirectory() as tmp:
        files = [Path(f) for f in args.files]
        if not files:
            half = args.batch // 2
            corpus = generate_corpus(CorpusSpec(benign=args.batch - half, malicious=half), seed=0)
            corpus.write(tmp)
            files = [Path(tmp) / s.path for s in corpus.samples]
        files = files[: args.batch]
        reports = [benchmark_extraction(files, ica_components=args.ica_components, reader=reader)
                   for _ in range(args.repeat)]

    for i, r in enumerate(reports):
        print(f"repeat {i}: {r.total_seconds:.3f}s over {r.batch_size} files ({r.reader})")
        for s in r.stages:
            energy = "" if s.joules is None else f"  {s.watts:.2f} W  {s.joules:.3f} J"
            print(f"  {s.name:<24}{s.seconds:>9.4f}s{energy}")
    payload = {"runs": [r.to_dict() for r in reports]}
    if len(reports) > 1:
        payload["variation"] = repeat_variation(reports[0], reports[1])
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=1))


if __name__ == "__main__":
    main()
