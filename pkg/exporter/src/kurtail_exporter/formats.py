"""Standalone writers for the toolkit's binary formats.

These mirror the documented KTAC/KTWT layouts exactly (little-endian headers,
float32 row-major payloads) without importing the toolkit itself; the file
format is the interface between the two packages.

KTAC: magic "KTAC", version u32, dtype u32 (0 = f32), layer u32, block u32
(0 mhsa_input / 1 ffn_input / 2 value_output), rows u64, cols u64, payload.
A directory of KTAC files carries an activations_meta.json sidecar with
d_model / n_heads / sample_count / sequence_length / source.

KTWT: magic "KTWT", version u32, d_model u32, n_heads u32, d_ff u32,
n_layers u32, vocab u32 (0 = direct), flags u32 (bit0 = norm scales folded),
r3/r4/r5 online seeds i64 (-1 = off), rope_base f64, rms_eps f64; tensors
f32 row-major in the order: embed, per layer [rms1, wq, wk, wv, wo, rms2,
wup, wgate, wdown], final_rms, unembed. Weights are (d_in, d_out).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

KTAC_MAGIC = b"KTAC"
KTWT_MAGIC = b"KTWT"
FORMAT_VERSION = 1
BLOCK_CODES = {"mhsa_input": 0, "ffn_input": 1, "value_output": 2}

_KTAC_HEADER = struct.Struct("<4sIIIIQQ")
_KTWT_HEADER = struct.Struct("<4sIIIIIIIqqqdd")


def ktac_filename(layer: int, block_kind: str) -> str:
    return f"acts_L{layer:03d}_{block_kind}.ktac"


def write_ktac(path, layer: int, block_kind: str, tokens: np.ndarray) -> None:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("activation payload must be 2-D")
    header = _KTAC_HEADER.pack(
        KTAC_MAGIC, FORMAT_VERSION, 0, layer, BLOCK_CODES[block_kind],
        tokens.shape[0], tokens.shape[1],
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(tokens, dtype="<f4").tobytes())


def write_activation_meta(dirpath, d_model, n_heads, sample_count, sequence_length, source):
    meta = {
        "d_model": int(d_model),
        "n_heads": int(n_heads),
        "sample_count": int(sample_count),
        "sequence_length": int(sequence_length),
        "source": source,
    }
    (Path(dirpath) / "activations_meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1) + "\n"
    )


def write_ktwt(
    path,
    *,
    d_model: int,
    n_heads: int,
    d_ff: int,
    n_layers: int,
    vocab: int,
    rope_base: float,
    rms_eps: float,
    embed: np.ndarray,
    layers: list[dict],
    final_rms: np.ndarray,
    unembed: np.ndarray,
    scales_folded: bool = False,
) -> None:
    """Emit a weight file; `layers` entries hold the nine per-layer tensors
    keyed rms1, wq, wk, wv, wo, rms2, wup, wgate, wdown in math convention."""
    header = _KTWT_HEADER.pack(
        KTWT_MAGIC, FORMAT_VERSION, d_model, n_heads, d_ff, n_layers, vocab,
        1 if scales_folded else 0, -1, -1, -1, rope_base, rms_eps,
    )
    order = ("rms1", "wq", "wk", "wv", "wo", "rms2", "wup", "wgate", "wdown")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(embed, dtype="<f4").tobytes())
        for layer in layers:
            for key in order:
                f.write(np.ascontiguousarray(layer[key], dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(final_rms, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(unembed, dtype="<f4").tobytes())
