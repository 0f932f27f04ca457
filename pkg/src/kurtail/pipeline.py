"""End-to-end orchestration: synthesize or load a model, capture activations
layer-wise, train rotations, fuse, quantize, and evaluate, emitting CSV/JSON
artifacts. Every stage is deterministic under the config's seeds; summaries
carry no timestamps so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import fileio
from .gptq import HessianCollector, gptq_quantize
from .linalg import OrthogonalMatrix, randomized_hadamard
from .quant import QuantSpec, dequantize, quantize, sensitivity
from .rotor import ActivationSet, ProxyNet, TrainConfig, proxy_forward, train_r1, train_r2
from .stats import kurtosis
from .toyformer import (
    DecoderModel,
    LayerWeights,
    ModelConfig,
    OnlineModes,
    QuantConfigSet,
    RotationSet,
    fold_layer,
    fold_rmsnorm,
    forward,
    fuse_rotations,
    invariance_report,
    layer_forward,
    outlier_channels,
    plant_layer_outliers,
    random_layer,
    random_model,
    random_non_layer_params,
    success_rate,
)

SENSITIVITY_ALPHAS = (0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)

# contract for summary.json emitted by run_end_to_end
SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["config", "seeds", "training", "metrics"],
    "properties": {
        "config": {"type": "object"},
        "seeds": {
            "type": "object",
            "required": ["master", "model", "data", "train", "eval"],
            "additionalProperties": {"type": "integer"},
        },
        "training": {"type": "object"},
        "metrics": {
            "type": "object",
            "required": [
                "invariance_deviation",
                "quantized_output_mse",
                "toy_perplexity",
                "kurtosis_before",
                "kurtosis_after",
                "success_rate",
            ],
            "properties": {
                "invariance_deviation": {"type": "number"},
                "quantized_output_mse": {
                    "type": "object",
                    "required": ["rotated", "unrotated"],
                    "additionalProperties": {"type": "number"},
                },
                "toy_perplexity": {
                    "type": "object",
                    "required": ["rotated", "unrotated"],
                    "additionalProperties": {"type": "number"},
                },
                "kurtosis_before": {"type": "object", "additionalProperties": {"type": "number"}},
                "kurtosis_after": {"type": "object", "additionalProperties": {"type": "number"}},
                "success_rate": {"type": "object", "additionalProperties": {"type": "number"}},
            },
        },
    },
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def parallel_map(fn, items):
    """Ordered map over a worker pool sized by KURTAIL_THREADS (default 1)."""
    items = list(items)
    workers = int(os.environ.get("KURTAIL_THREADS", "1"))
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class RunConfig:
    """One experiment's worth of knobs; seeds left as None derive from `seed`."""

    # model
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_layers: int = 4
    vocab_size: int | None = 256
    rope_base: float = 10000.0
    planted_outliers: bool = True
    n_outlier_channels: int = 2
    outlier_scale: float = 50.0
    outlier_site: str = "embed"  # embed | projections | both
    embed_structure: str = "gaussian"  # gaussian | mixed_sources | uniform_sources
    weight_file: str | None = None
    # calibration corpus
    samples: int = 512
    sequence_length: int = 128
    # rotation training
    train_iterations: int = 100
    batch_groups: int = 8
    batch_tokens: int = 1024
    eval_tokens: int = 4096
    lr: float = 0.05
    train_init: str = "random"
    # rotation modes
    r1_mode: str = "train"  # train | hadamard | off
    r2_mode: str = "train"  # train | hadamard | off
    r3_on: bool = True
    r4_on: bool = True
    r5_on: bool = True
    # quantization
    bits: int = 4
    activation_clip: float = 0.98
    weight_method: str = "rtn"  # rtn | gptq
    gptq_samples: int = 128
    # evaluation
    eval_samples: int = 16
    # seeds: master plus derived sub-seeds
    seed: int = 0
    model_seed: int | None = None
    data_seed: int | None = None
    train_seed: int | None = None
    eval_seed: int | None = None
    output_dir: str = "runs/out"

    def resolved(self) -> "RunConfig":
        base = 1000 * self.seed
        return replace(
            self,
            model_seed=self.model_seed if self.model_seed is not None else base + 1,
            data_seed=self.data_seed if self.data_seed is not None else base + 2,
            train_seed=self.train_seed if self.train_seed is not None else base + 3,
            eval_seed=self.eval_seed if self.eval_seed is not None else base + 4,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff,
            n_layers=self.n_layers, rope_base=self.rope_base, vocab_size=self.vocab_size,
        )

    def train_config(self) -> TrainConfig:
        # a hadamard init starts training at the exact rotation the hadamard
        # comparison condition uses, making condition comparisons paired
        init_seed = 1000 * self.seed + 21 if self.train_init == "hadamard" else None
        return TrainConfig(
            iterations=self.train_iterations, batch_groups=self.batch_groups,
            batch_tokens=self.batch_tokens, eval_tokens=self.eval_tokens, lr=self.lr,
            init=self.train_init, seed=self.train_seed if self.train_seed is not None else 0,
            init_seed=init_seed,
        )

    def quant_config(self) -> QuantConfigSet:
        return QuantConfigSet(
            activation=QuantSpec(self.bits, "symmetric", "per_token", self.activation_clip),
            kv=QuantSpec(self.bits, "asymmetric", "per_token"),
            weight_method=self.weight_method,
            weight_bits=self.bits,
        )

    def online_modes(self) -> OnlineModes:
        base = 1000 * self.seed
        return OnlineModes(
            r3=base + 11 if self.r3_on else None,
            r4=base + 12 if self.r4_on else None,
            r5=base + 13 if self.r5_on else None,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise PipelineError("config", f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class SyntheticModelSource:
    """Regenerates any single layer from its seed, so capture never needs the
    whole model in memory."""

    def __init__(self, cfg: RunConfig):
        cfg = cfg.resolved()
        self.run = cfg
        self.config = cfg.model_config()
        self.seed = cfg.model_seed
        self._cols = (
            outlier_channels(self.config, self.seed, cfg.n_outlier_channels)
            if cfg.planted_outliers
            else None
        )

    def layer(self, i: int, folded: bool = True) -> LayerWeights:
        layer = random_layer(self.config, self.seed, i)
        if self._cols is not None and self.run.outlier_site in ("projections", "both"):
            plant_layer_outliers(layer, self._cols, self.run.outlier_scale)
        return fold_layer(layer) if folded else layer

    def non_layer_params(self):
        embed, final_rms, unembed = random_non_layer_params(
            self.config, self.seed, self.run.embed_structure
        )
        if (
            self._cols is not None
            and self.run.outlier_site in ("embed", "both")
            and self.config.vocab_size is not None
        ):
            embed[:, self._cols] *= self.run.outlier_scale
        return embed, final_rms, unembed

    def embed_matrix(self) -> np.ndarray:
        return self.non_layer_params()[0]

    def full_model(self, folded: bool = True) -> DecoderModel:
        model = random_model(
            self.config, self.seed,
            planted_outliers=self.run.planted_outliers,
            n_outlier_channels=self.run.n_outlier_channels,
            outlier_scale=self.run.outlier_scale,
            outlier_site=self.run.outlier_site,
            embed_structure=self.run.embed_structure,
        )
        return fold_rmsnorm(model) if folded else model


class FileModelSource:
    """Layer-at-a-time access to a KTWT weight file."""

    def __init__(self, path):
        self.path = Path(path)
        self.config, self.scales_folded, self.online = fileio.read_model_header(path)

    def layer(self, i: int, folded: bool = True) -> LayerWeights:
        layer = fileio.load_layer(self.path, i)
        if folded and not self.scales_folded:
            fold_layer(layer)
        return layer

    def embed_matrix(self) -> np.ndarray:
        return fileio.load_named_tensor(self.path, "embed")

    def full_model(self, folded: bool = True) -> DecoderModel:
        model = fileio.load_model(self.path)
        if folded and not model.scales_folded:
            model = fold_rmsnorm(model)
        return model


def model_source(cfg: RunConfig):
    if cfg.weight_file:
        return FileModelSource(cfg.weight_file)
    return SyntheticModelSource(cfg)


def synthetic_corpus(cfg: RunConfig, count: int, seed: int) -> list[np.ndarray]:
    """Seeded token-id sequences (vocab mode) or Gaussian inputs (direct)."""
    rng = np.random.default_rng(seed)
    if cfg.vocab_size is not None:
        return [
            rng.integers(0, cfg.vocab_size, size=cfg.sequence_length)
            for _ in range(count)
        ]
    return [
        rng.standard_normal((cfg.sequence_length, cfg.d_model)) for _ in range(count)
    ]


def capture_activations(
    source,
    sequences: list[np.ndarray],
    out_dir=None,
    source_tag: str = "synthetic",
) -> ActivationSet:
    """Layer-wise capture: stream every sequence through one layer at a time.

    Only a single layer's weights are resident at any point; each layer's
    records go to disk (when out_dir is given) before the next layer loads.
    The captured values are identical to a monolithic forward pass.
    """
    cfg = source.config
    embed = source.embed_matrix()
    states = []
    for seq in sequences:
        if np.issubdtype(np.asarray(seq).dtype, np.integer):
            states.append(embed[np.asarray(seq)])
        else:
            states.append(np.asarray(seq, dtype=np.float64) @ embed)
    acts = ActivationSet(
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        sample_count=len(sequences),
        sequence_length=int(states[0].shape[0]) if states else 0,
        source=source_tag,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for li in range(cfg.n_layers):
        layer = source.layer(li, folded=True)
        layer_acts = ActivationSet(d_model=cfg.d_model, n_heads=cfg.n_heads)
        for si, h in enumerate(states):
            positions = np.arange(h.shape[0])
            states[si] = layer_forward(cfg, layer, h, positions, li=li, capture=layer_acts)
        for _, kind, mat in layer_acts.groups(("mhsa_input", "ffn_input", "value_output")):
            acts.add(li, kind, mat)
            if out_dir is not None:
                fileio.write_ktac(out_dir / fileio.ktac_filename(li, kind), li, kind, mat)
        del layer
    if out_dir is not None:
        meta = {
            "d_model": acts.d_model,
            "n_heads": acts.n_heads,
            "sample_count": acts.sample_count,
            "sequence_length": acts.sequence_length,
            "source": acts.source,
        }
        (out_dir / "activations_meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=1) + "\n"
        )
    return acts


def train_rotations(cfg: RunConfig, acts: ActivationSet) -> tuple[RotationSet, dict]:
    """R1/R2 per the configured modes; returns the set plus training metrics."""
    cfg = cfg.resolved()
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    log: dict = {}
    if cfg.r1_mode == "train":
        r1_result = train_r1(acts, tcfg)
        r1 = r1_result.rotation
        log["r1_initial_loss"] = float(r1_result.losses[0])
        log["r1_final_loss"] = float(r1_result.losses[r1_result.best_iteration])
        log["r1_losses"] = [float(v) for v in r1_result.losses]
    elif cfg.r1_mode == "hadamard":
        r1 = randomized_hadamard(mcfg.d_model, cfg.seed * 1000 + 21)
    else:
        r1 = None
    r2s: list[OrthogonalMatrix] | None
    if cfg.r2_mode == "train":
        r2s = []
        log["r2_final_losses"] = []
        for li in acts.layers():
            init_seed = 1000 * cfg.seed + 31 + li if tcfg.init == "hadamard" else None
            res = train_r2(
                acts, li, replace(tcfg, seed=tcfg.seed + 100 + li, init_seed=init_seed)
            )
            r2s.append(res.rotation)
            log["r2_final_losses"].append(float(res.losses[res.best_iteration]))
    elif cfg.r2_mode == "hadamard":
        r2s = [
            OrthogonalMatrix(
                np.kron(
                    np.eye(mcfg.n_heads),
                    randomized_hadamard(mcfg.head_dim, cfg.seed * 1000 + 31 + li).q,
                )
            )
            for li in range(mcfg.n_layers)
        ]
    else:
        r2s = None
    rotations = RotationSet(
        r1=r1, r2=tuple(r2s) if r2s is not None else None, online=cfg.online_modes()
    )
    return rotations, log


def quantize_model_weights(
    model: DecoderModel,
    method: str,
    bits: int,
    hessians: dict | None = None,
) -> DecoderModel:
    """Replace the per-layer linear weights with their simulated-quant values.

    Embedding/unembedding stay full precision. GPTQ needs the Hessian map
    produced by a HessianCollector calibration pass.
    """
    hess_key = {"wq": "qkv", "wk": "qkv", "wv": "qkv", "wo": "o",
                "wup": "upgate", "wgate": "upgate", "wdown": "down"}
    out = model.copy()
    for li, layer in enumerate(out.layers):
        for name in ("wq", "wk", "wv", "wo", "wup", "wgate", "wdown"):
            w = getattr(layer, name)
            if method == "rtn":
                q = quantize(w, QuantSpec(bits, "symmetric", "per_channel"))
            elif method == "gptq":
                if hessians is None:
                    raise PipelineError("quantize", "gptq requires calibration Hessians")
                q = gptq_quantize(w, hessians[(li, hess_key[name])], bits)
            else:
                raise PipelineError("quantize", f"unknown weight method {method!r}")
            setattr(layer, name, dequantize(q))
    return out


def calibrate_hessians(model: DecoderModel, sequences: list[np.ndarray]) -> dict:
    collector = HessianCollector()
    for seq in sequences:
        forward(model, seq, collector=collector)
    return collector.finalize()


def _group_kurtosis(acts: ActivationSet) -> dict[str, float]:
    return {
        f"L{layer}.{kind}": float(kurtosis(mat.ravel()).kappa)
        for layer, kind, mat in acts.groups(("mhsa_input", "ffn_input", "value_output"))
    }


def run_end_to_end(cfg: RunConfig, write_files: bool = True) -> dict:
    """capture -> train -> fuse -> weight-quantize -> evaluate -> summary.

    The summary JSON contains the config echo, all seeds, and every metric;
    rerunning with the same config is byte-identical.
    """
    cfg = cfg.resolved()
    out_dir = Path(cfg.output_dir)
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)

    def stage(name, fn):
        try:
            return fn()
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(name, str(e)) from e

    source = stage("model", lambda: model_source(cfg))
    folded = stage("model", lambda: source.full_model(folded=True))

    calib = stage(
        "capture", lambda: synthetic_corpus(cfg, cfg.samples, cfg.data_seed)
    )
    acts = stage(
        "capture",
        lambda: capture_activations(
            source, calib, out_dir / "acts" if write_files else None
        ),
    )

    rotations, train_log = stage("train", lambda: train_rotations(cfg, acts))
    if write_files and rotations.r1 is not None:
        fileio.save_rotation(out_dir / "r1.npy", rotations.r1.q)
    if write_files and rotations.r2 is not None:
        for li, r2 in enumerate(rotations.r2):
            fileio.save_rotation(out_dir / f"r2_layer{li}.npy", r2.q)

    rotated = stage("fuse", lambda: fuse_rotations(folded, rotations))

    qcfg = cfg.quant_config()
    gptq_calib = calib[: min(cfg.gptq_samples, len(calib))]
    if cfg.weight_method == "gptq":
        hess_rot = stage("quantize", lambda: calibrate_hessians(rotated, gptq_calib))
        hess_plain = stage("quantize", lambda: calibrate_hessians(folded, gptq_calib))
    else:
        hess_rot = hess_plain = None
    rotated_q = stage(
        "quantize",
        lambda: quantize_model_weights(rotated, cfg.weight_method, cfg.bits, hess_rot),
    )
    plain_q = stage(
        "quantize",
        lambda: quantize_model_weights(folded, cfg.weight_method, cfg.bits, hess_plain),
    )

    def evaluate() -> dict:
        eval_seqs = synthetic_corpus(cfg, cfg.eval_samples, cfg.eval_seed)
        inv = invariance_report(folded, rotated, eval_seqs)
        acts_plain = ActivationSet(d_model=cfg.d_model, n_heads=cfg.n_heads)
        acts_rot = ActivationSet(d_model=cfg.d_model, n_heads=cfg.n_heads)
        sq_rot, sq_plain, n_out = 0.0, 0.0, 0

        def run_one(seq):
            fp = forward(folded, seq, capture=acts_plain)
            forward(rotated, seq, capture=acts_rot)
            qr = forward(rotated_q, seq, quant=qcfg)
            qp = forward(plain_q, seq, quant=qcfg)
            return fp, qr, qp

        for seq in eval_seqs:
            fp, qr, qp = run_one(seq)
            sq_rot += float(np.sum((qr - fp) ** 2))
            sq_plain += float(np.sum((qp - fp) ** 2))
            n_out += fp.size
        mse_rot = sq_rot / n_out
        mse_plain = sq_plain / n_out
        rates = success_rate(acts_plain, acts_rot)
        return {
            "invariance_deviation": inv,
            "quantized_output_mse": {"rotated": mse_rot, "unrotated": mse_plain},
            "toy_perplexity": {
                "rotated": float(np.exp(mse_rot)),
                "unrotated": float(np.exp(mse_plain)),
            },
            "kurtosis_before": _group_kurtosis(acts_plain),
            "kurtosis_after": _group_kurtosis(acts_rot),
            "success_rate": rates,
        }

    metrics = stage("eval", evaluate)
    summary = {
        "config": asdict(cfg),
        "seeds": {
            "master": cfg.seed, "model": cfg.model_seed, "data": cfg.data_seed,
            "train": cfg.train_seed, "eval": cfg.eval_seed,
        },
        "training": train_log,
        "metrics": metrics,
    }
    if write_files:
        (out_dir / "summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=1) + "\n"
        )
    return summary


def condition_rotation(
    cfg: RunConfig, acts: ActivationSet, condition: str
) -> OrthogonalMatrix:
    """The residual-stream rotation a sensitivity condition applies."""
    cfg = cfg.resolved()
    d = cfg.model_config().d_model
    if condition == "vanilla":
        return OrthogonalMatrix(np.eye(d))
    if condition == "hadamard":
        return randomized_hadamard(d, cfg.seed * 1000 + 21)
    if condition == "kurtail":
        return train_r1(acts, cfg.train_config()).rotation
    raise PipelineError("sensitivity", f"unknown condition {condition!r}")


def run_sensitivity_experiment(
    cfg: RunConfig,
    out_csv=None,
    alphas: tuple[float, ...] = SENSITIVITY_ALPHAS,
    conditions: tuple[str, ...] = ("vanilla", "hadamard", "kurtail"),
    acts: ActivationSet | None = None,
    post_norm: bool = False,
) -> list[dict]:
    """Gamma(alpha) per (layer, block, condition) on the rotated captures
    x @ R; tokens are concatenated per layer/block before the sweep (recorded
    in the metadata sidecar). post_norm sweeps the normalized quantization
    point rmsnorm(x @ R) instead of the captured pre-norm distribution."""
    cfg = cfg.resolved()
    if acts is None:
        source = model_source(cfg)
        calib = synthetic_corpus(cfg, cfg.samples, cfg.data_seed)
        acts = capture_activations(source, calib)
    for needed in ("mhsa_input", "ffn_input"):
        if not any(r.block_kind == needed for r in acts.records):
            raise PipelineError("sensitivity", f"missing {needed} records")
    rotations = {c: condition_rotation(cfg, acts, c) for c in conditions}
    groups = acts.groups(("mhsa_input", "ffn_input"))

    def one(args):
        layer, kind, mat, condition = args
        net = ProxyNet(rotations[condition], use_rmsnorm=post_norm)
        flat = proxy_forward(mat, net).ravel()
        rep = sensitivity(flat, cfg.bits, alphas, condition=condition, layer=layer, block=kind)
        return [
            {"layer": layer, "block": kind, "condition": condition,
             "alpha": a, "gamma": g}
            for a, g in zip(rep.alphas, rep.gamma)
        ]

    jobs = [
        (layer, kind, mat, condition)
        for layer, kind, mat in groups
        for condition in conditions
    ]
    rows = [row for chunk in parallel_map(one, jobs) for row in chunk]
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["layer", "block", "condition", "alpha", "gamma"])
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "alpha": repr(row["alpha"]), "gamma": repr(row["gamma"])})
        meta = {
            "alphas": list(alphas),
            "conditions": list(conditions),
            "bits": cfg.bits,
            "aggregation": "tokens concatenated per (layer, block) before the sweep",
            "distribution": "rmsnorm(x @ R)" if post_norm else "x @ R",
            "seed": cfg.seed,
        }
        out_csv.with_suffix(".meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=1) + "\n"
        )
    return rows


def emit_outlier_figure_data(
    before: ActivationSet, after: ActivationSet, out_csv, max_tokens: int | None = None
) -> int:
    """Per-(token, channel) magnitudes with per-token max columns, before and
    after rotation, for external plotting. Returns rows written."""
    b = {(layer, kind): m for layer, kind, m in before.groups(("mhsa_input", "ffn_input", "value_output"))}
    a = {(layer, kind): m for layer, kind, m in after.groups(("mhsa_input", "ffn_input", "value_output"))}
    if b.keys() != a.keys():
        raise PipelineError("figure-data", "activation sets cover different records")
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["layer", "block", "token", "channel", "abs_before", "abs_after",
             "token_max_before", "token_max_after"]
        )
        for key in sorted(b):
            mb, ma = b[key], a[key]
            if mb.shape != ma.shape:
                raise PipelineError("figure-data", f"shape mismatch for {key}")
            rows = mb.shape[0] if max_tokens is None else min(max_tokens, mb.shape[0])
            maxb = np.max(np.abs(mb), axis=1)
            maxa = np.max(np.abs(ma), axis=1)
            for t in range(rows):
                for c in range(mb.shape[1]):
                    writer.writerow(
                        [key[0], key[1], t, c,
                         repr(float(abs(mb[t, c]))), repr(float(abs(ma[t, c]))),
                         repr(float(maxb[t])), repr(float(maxa[t]))]
                    )
                    n += 1
    return n
