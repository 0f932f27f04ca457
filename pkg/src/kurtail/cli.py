"""Command line entry point.

Verbs: capture, train-rot, fuse, quantize, eval, sensitivity, figure-data,
pipeline. Configuration comes from one JSON file (every RunConfig field) with
individual flag overrides; experiment verbs require an explicit --seed.
Worker-pool width comes from the KURTAIL_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio, pipeline
from .linalg import OrthogonalMatrix
from .rotor import save_training_log, train_r1, train_r2
from .toyformer import RotationSet, fold_rmsnorm, forward, fuse_rotations, invariance_report


def _load_config(args) -> pipeline.RunConfig:
    cfg = (
        pipeline.RunConfig.from_json_file(args.config)
        if args.config
        else pipeline.RunConfig()
    )
    overrides = {}
    for name in ("seed", "output_dir", "samples", "sequence_length", "d_model",
                 "n_layers", "train_iterations", "weight_method", "eval_samples",
                 "weight_file"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.resolved()


def _add_common(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int, required=seed_required,
                   help="master seed (mandatory for experiment verbs)")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--samples", type=int)
    p.add_argument("--sequence-length", dest="sequence_length", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--train-iterations", dest="train_iterations", type=int)
    p.add_argument("--weight-method", dest="weight_method", choices=["rtn", "gptq"])
    p.add_argument("--eval-samples", dest="eval_samples", type=int)
    p.add_argument("--weight-file", dest="weight_file")


def cmd_capture(args) -> int:
    cfg = _load_config(args)
    source = pipeline.model_source(cfg)
    seqs = pipeline.synthetic_corpus(cfg, cfg.samples, cfg.data_seed)
    out = Path(cfg.output_dir) / "acts"
    acts = pipeline.capture_activations(source, seqs, out)
    print(f"captured {len(acts.records)} records -> {out}")
    return 0


def cmd_train_rot(args) -> int:
    cfg = _load_config(args)
    acts = fileio.load_activation_set(args.acts)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    r1 = train_r1(acts, tcfg)
    fileio.save_rotation(out / "r1.npy", r1.rotation.q)
    save_training_log(out / "r1_training_log.csv", r1.losses)
    for li in acts.layers():
        r2 = train_r2(acts, li, replace(tcfg, seed=tcfg.seed + 100 + li))
        fileio.save_rotation(out / f"r2_layer{li}.npy", r2.rotation.q)
        save_training_log(out / f"r2_layer{li}_training_log.csv", r2.losses)
    print(f"rotations -> {out} (r1 loss {r1.losses[0]:.4f} -> "
          f"{r1.losses[r1.best_iteration]:.4f})")
    return 0


def cmd_fuse(args) -> int:
    cfg = _load_config(args)
    model = fileio.load_model(args.model)
    if not model.scales_folded:
        model = fold_rmsnorm(model)
    rot_dir = Path(args.rotations)
    r1 = None
    r1_path = rot_dir / "r1.npy"
    if r1_path.exists():
        r1 = OrthogonalMatrix(fileio.load_rotation(r1_path))
    r2s = []
    for li in range(model.config.n_layers):
        p = rot_dir / f"r2_layer{li}.npy"
        if p.exists():
            r2s.append(OrthogonalMatrix(fileio.load_rotation(p)))
    rotations = RotationSet(
        r1=r1,
        r2=tuple(r2s) if len(r2s) == model.config.n_layers else None,
        online=cfg.online_modes(),
    )
    fused = fuse_rotations(model, rotations)
    fileio.save_model(args.out_model, fused)
    print(f"fused model -> {args.out_model}")
    return 0


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    model = fileio.load_model(args.model)
    hessians = None
    if cfg.weight_method == "gptq":
        seqs = pipeline.synthetic_corpus(cfg, cfg.gptq_samples, cfg.data_seed)
        hessians = pipeline.calibrate_hessians(model, seqs)
    quantized = pipeline.quantize_model_weights(model, cfg.weight_method, cfg.bits, hessians)
    fileio.save_model(args.out_model, quantized)
    print(f"{cfg.weight_method} {cfg.bits}-bit weights -> {args.out_model}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    reference = fileio.load_model(args.reference)
    subject = fileio.load_model(args.subject)
    seqs = pipeline.synthetic_corpus(cfg, cfg.eval_samples, cfg.eval_seed)
    inv = invariance_report(reference, subject, seqs)
    qcfg = cfg.quant_config()
    sq, n = 0.0, 0
    for seq in seqs:
        fp = forward(reference, seq)
        q = forward(subject, seq, quant=qcfg)
        sq += float(np.sum((q - fp) ** 2))
        n += fp.size
    metrics = {
        "invariance_deviation": inv,
        "quantized_output_mse": sq / n,
        "toy_perplexity": float(np.exp(sq / n)),
    }
    print(json.dumps(metrics, sort_keys=True, indent=1))
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
    return 0


def cmd_sensitivity(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir) / "sensitivity.csv"
    rows = pipeline.run_sensitivity_experiment(cfg, out_csv=out)
    print(f"{len(rows)} sensitivity rows -> {out}")
    return 0


def cmd_figure_data(args) -> int:
    before = fileio.load_activation_set(args.before)
    after = fileio.load_activation_set(args.after)
    n = pipeline.emit_outlier_figure_data(before, after, args.out_csv,
                                          max_tokens=args.max_tokens)
    print(f"{n} grid rows -> {args.out_csv}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    summary = pipeline.run_end_to_end(cfg)
    print(json.dumps(summary["metrics"], sort_keys=True, indent=1))
    print(f"summary -> {Path(cfg.output_dir) / 'summary.json'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kurtail", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("capture", help="capture activations layer-wise")
    _add_common(p)
    p.set_defaults(fn=cmd_capture)

    p = sub.add_parser("train-rot", help="train rotations from captured activations")
    _add_common(p)
    p.add_argument("--acts", required=True, help="directory of KTAC files")
    p.set_defaults(fn=cmd_train_rot)

    p = sub.add_parser("fuse", help="fuse rotations into a weight file")
    _add_common(p, seed_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--rotations", required=True)
    p.add_argument("--out-model", required=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("quantize", help="simulated weight quantization (rtn/gptq)")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out-model", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="compare a subject model against a reference")
    _add_common(p)
    p.add_argument("--reference", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out-json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sensitivity", help="step-size sensitivity experiment")
    _add_common(p)
    p.set_defaults(fn=cmd_sensitivity)

    p = sub.add_parser("figure-data", help="outlier magnitude grid CSV")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--max-tokens", type=int)
    p.set_defaults(fn=cmd_figure_data)

    p = sub.add_parser("pipeline", help="full end-to-end run")
    _add_common(p)
    p.set_defaults(fn=cmd_pipeline)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
