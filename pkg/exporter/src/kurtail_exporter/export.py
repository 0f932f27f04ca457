"""Export pretrained decoder checkpoints into the toolkit's file formats.

Supports LLaMA-style architectures (RMSNorm + rotary attention + SwiGLU,
no attention/MLP biases, full multi-head attention). Activations are
captured with forward hooks at the three points the toolkit consumes:
the residual-stream input of each attention norm, of each FFN norm, and the
value-projection outputs. Everything is written as float32 regardless of the
checkpoint dtype.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

from . import formats


class ExportError(RuntimeError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class LoadedModel:
    model: torch.nn.Module
    config: object
    model_id: str

    @property
    def layers(self):
        return self.model.model.layers


def load_checkpoint(model_id: str, allow_non_pow2: bool = False) -> LoadedModel:
    model = AutoModelForCausalLM.from_pretrained(model_id, dtype=torch.float32)
    model.eval()
    cfg = model.config
    if getattr(cfg, "num_key_value_heads", cfg.num_attention_heads) != cfg.num_attention_heads:
        raise ExportError("grouped-query attention is not representable in KTWT")
    head_dim = cfg.hidden_size // cfg.num_attention_heads
    dims = {
        "d_model": cfg.hidden_size,
        "head_dim": head_dim,
        "d_ff": cfg.intermediate_size,
    }
    bad = [f"{k}={v}" for k, v in dims.items() if not _is_pow2(v)]
    if bad and not allow_non_pow2:
        raise ExportError(
            f"non-power-of-two dims ({', '.join(bad)}); the toolkit's online "
            "rotations need powers of two (pass allow_non_pow2 to emit anyway)"
        )
    return LoadedModel(model=model, config=cfg, model_id=model_id)


def _write_manifest(out_dir: Path, payload: dict, files: list[Path]) -> Path:
    payload = dict(payload)
    payload["checksums"] = {p.name: _sha256(p) for p in sorted(files)}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path


def verify_manifest(out_dir) -> bool:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    for name, digest in manifest["checksums"].items():
        if _sha256(out_dir / name) != digest:
            return False
    return True


def export_weights(model_id: str, out_dir, allow_non_pow2: bool = False) -> Path:
    """Emit model.ktwt plus a manifest; tensors transpose to (d_in, d_out)."""
    loaded = load_checkpoint(model_id, allow_non_pow2)
    cfg = loaded.config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def mat(t: torch.Tensor) -> np.ndarray:
        return t.detach().to(torch.float32).cpu().numpy()

    layers = []
    for layer in loaded.layers:
        layers.append({
            "rms1": mat(layer.input_layernorm.weight),
            "wq": mat(layer.self_attn.q_proj.weight).T,
            "wk": mat(layer.self_attn.k_proj.weight).T,
            "wv": mat(layer.self_attn.v_proj.weight).T,
            "wo": mat(layer.self_attn.o_proj.weight).T,
            "rms2": mat(layer.post_attention_layernorm.weight),
            "wup": mat(layer.mlp.up_proj.weight).T,
            "wgate": mat(layer.mlp.gate_proj.weight).T,
            "wdown": mat(layer.mlp.down_proj.weight).T,
        })
    weight_path = out_dir / "model.ktwt"
    formats.write_ktwt(
        weight_path,
        d_model=cfg.hidden_size,
        n_heads=cfg.num_attention_heads,
        d_ff=cfg.intermediate_size,
        n_layers=cfg.num_hidden_layers,
        vocab=cfg.vocab_size,
        rope_base=float(getattr(cfg, "rope_theta", 10000.0)),
        rms_eps=float(getattr(cfg, "rms_norm_eps", 1e-6)),
        embed=mat(loaded.model.model.embed_tokens.weight),
        layers=layers,
        final_rms=mat(loaded.model.model.norm.weight),
        unembed=mat(loaded.model.lm_head.weight).T,
    )
    _write_manifest(out_dir, _manifest_payload(loaded, None, 0, 0), [weight_path])
    return weight_path


def calibration_ids(
    model_id: str, dataset: str, samples: int, seqlen: int, seed: int, vocab: int
) -> np.ndarray:
    """(samples, seqlen) int token ids. `synthetic` draws seeded uniform ids;
    `textfile:PATH` tokenizes a local file with the checkpoint's tokenizer."""
    if dataset == "synthetic":
        rng = np.random.default_rng(seed)
        return rng.integers(0, vocab, size=(samples, seqlen))
    if dataset.startswith("textfile:"):
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        text = Path(dataset.split(":", 1)[1]).read_text()
        ids = tokenizer(text, return_tensors="np")["input_ids"][0]
        needed = samples * seqlen
        if ids.size < needed:
            raise ExportError(f"text file too short: {ids.size} tokens < {needed}")
        return ids[:needed].reshape(samples, seqlen)
    raise ExportError(f"unknown dataset spec {dataset!r}")


def export_activations(
    model_id: str,
    out_dir,
    dataset: str = "synthetic",
    samples: int = 8,
    seqlen: int = 64,
    seed: int = 0,
    allow_non_pow2: bool = False,
) -> list[Path]:
    """Capture pre-norm block inputs and value projections into KTAC files.

    One file per (layer, block kind), tokens stacked over all samples, plus
    the meta sidecar and a manifest with checksums.
    """
    loaded = load_checkpoint(model_id, allow_non_pow2)
    cfg = loaded.config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = calibration_ids(model_id, dataset, samples, seqlen, seed, cfg.vocab_size)

    captured: dict[tuple[int, str], list[np.ndarray]] = {}

    def grab(layer_idx: int, kind: str):
        def hook(_module, inputs, output):
            tensor = output if kind == "value_output" else inputs[0]
            flat = tensor.detach().to(torch.float32).reshape(-1, tensor.shape[-1])
            captured.setdefault((layer_idx, kind), []).append(flat.cpu().numpy())
        return hook

    handles = []
    for li, layer in enumerate(loaded.layers):
        handles.append(layer.input_layernorm.register_forward_hook(grab(li, "mhsa_input")))
        handles.append(
            layer.post_attention_layernorm.register_forward_hook(grab(li, "ffn_input"))
        )
        handles.append(layer.self_attn.v_proj.register_forward_hook(grab(li, "value_output")))
    try:
        with torch.no_grad():
            for row in ids:
                loaded.model(torch.tensor(row[None, :], dtype=torch.long))
    finally:
        for h in handles:
            h.remove()

    files = []
    for (li, kind), chunks in sorted(captured.items()):
        path = out_dir / formats.ktac_filename(li, kind)
        formats.write_ktac(path, li, kind, np.vstack(chunks))
        files.append(path)
    formats.write_activation_meta(
        out_dir, cfg.hidden_size, cfg.num_attention_heads, samples, seqlen,
        source=f"{model_id}:{dataset}",
    )
    files.append(out_dir / "activations_meta.json")
    _write_manifest(out_dir, _manifest_payload(loaded, dataset, samples, seqlen), files)
    return files


def _manifest_payload(loaded: LoadedModel, dataset, samples, seqlen) -> dict:
    cfg = loaded.config
    return {
        "model": loaded.model_id,
        "n_layers": cfg.num_hidden_layers,
        "d_model": cfg.hidden_size,
        "n_heads": cfg.num_attention_heads,
        "d_ff": cfg.intermediate_size,
        "vocab_size": cfg.vocab_size,
        "tokenizer": loaded.model_id,
        "calibration": dataset,
        "sample_count": samples,
        "sequence_length": seqlen,
    }
