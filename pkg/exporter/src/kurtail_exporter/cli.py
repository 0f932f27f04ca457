"""CLI for the checkpoint exporter: export-acts and export-weights."""

from __future__ import annotations

import argparse
import sys

from .export import export_activations, export_weights


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kurtail-export", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("export-acts", help="capture activations into KTAC files")
    p.add_argument("--model", required=True, help="checkpoint id or local path")
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", default="synthetic",
                   help="'synthetic' or 'textfile:PATH'")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seqlen", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--allow-non-pow2", action="store_true")

    p = sub.add_parser("export-weights", help="emit a KTWT weight file")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-non-pow2", action="store_true")

    args = parser.parse_args(argv)
    if args.verb == "export-acts":
        files = export_activations(
            args.model, args.out, dataset=args.dataset, samples=args.samples,
            seqlen=args.seqlen, seed=args.seed, allow_non_pow2=args.allow_non_pow2,
        )
        print(f"{len(files)} files -> {args.out}")
    else:
        path = export_weights(args.model, args.out, allow_non_pow2=args.allow_non_pow2)
        print(f"weights -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
