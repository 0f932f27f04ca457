"""Binary file formats for activations (KTAC) and toy-model weights (KTWT).

Both are little-endian with 32-bit payloads; in-memory math stays 64-bit.

KTAC, one file per (layer, block):
    magic   4s   b"KTAC"
    version u32  1
    dtype   u32  0 = float32
    layer   u32
    block   u32  0 = mhsa_input, 1 = ffn_input, 2 = value_output
    rows    u64
    cols    u64
    data    rows*cols float32, row-major

KTWT, one file per model:
    magic     4s   b"KTWT"
    version   u32  1
    d_model   u32
    n_heads   u32
    d_ff      u32
    n_layers  u32
    vocab     u32  0 = direct-embedding mode
    flags     u32  bit 0: rmsnorm scales folded
    r3_seed   i64  online rotation seeds, -1 = off
    r4_seed   i64  (inverse folded into wo when >= 0)
    r5_seed   i64  (inverse folded into wdown when >= 0)
    rope_base f64
    rms_eps   f64
    tensors   float32 row-major, fixed order:
        embed, then per layer [rms1, wq, wk, wv, wo, rms2, wup, wgate, wdown],
        then final_rms, unembed
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .rotor import ActivationSet
from .toyformer import DecoderModel, LayerWeights, ModelConfig, OnlineModes

KTAC_MAGIC = b"KTAC"
KTWT_MAGIC = b"KTWT"
FORMAT_VERSION = 1
BLOCK_CODES = {"mhsa_input": 0, "ffn_input": 1, "value_output": 2}
BLOCK_NAMES = {v: k for k, v in BLOCK_CODES.items()}

_KTAC_HEADER = struct.Struct("<4sIIIIQQ")
_KTWT_HEADER = struct.Struct("<4sIIIIIIIqqqdd")


class FileFormatError(IOError):
    pass


def write_ktac(path, layer: int, block_kind: str, tokens: np.ndarray) -> None:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise FileFormatError("activation payload must be 2-D")
    header = _KTAC_HEADER.pack(
        KTAC_MAGIC, FORMAT_VERSION, 0, layer, BLOCK_CODES[block_kind],
        tokens.shape[0], tokens.shape[1],
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(tokens, dtype="<f4").tobytes())


def read_ktac(path) -> tuple[int, str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read(_KTAC_HEADER.size)
        if len(raw) < _KTAC_HEADER.size:
            raise FileFormatError(f"{path}: truncated header")
        magic, version, dtype, layer, block, rows, cols = _KTAC_HEADER.unpack(raw)
        if magic != KTAC_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION or dtype != 0:
            raise FileFormatError(f"{path}: unsupported version/dtype {version}/{dtype}")
        if block not in BLOCK_NAMES:
            raise FileFormatError(f"{path}: unknown block code {block}")
        data = np.frombuffer(f.read(rows * cols * 4), dtype="<f4")
        if data.size != rows * cols:
            raise FileFormatError(f"{path}: truncated payload")
    return layer, BLOCK_NAMES[block], data.astype(np.float64).reshape(rows, cols)


def ktac_filename(layer: int, block_kind: str) -> str:
    return f"acts_L{layer:03d}_{block_kind}.ktac"


def save_activation_set(dirpath, acts: ActivationSet) -> list[Path]:
    """One KTAC per (layer, block) with records stacked, plus a meta sidecar."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    written = []
    for layer, kind, mat in acts.groups(("mhsa_input", "ffn_input", "value_output")):
        p = dirpath / ktac_filename(layer, kind)
        write_ktac(p, layer, kind, mat)
        written.append(p)
    meta = {
        "d_model": acts.d_model,
        "n_heads": acts.n_heads,
        "sample_count": acts.sample_count,
        "sequence_length": acts.sequence_length,
        "source": acts.source,
    }
    meta_path = dirpath / "activations_meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    written.append(meta_path)
    return written


def load_activation_set(dirpath) -> ActivationSet:
    dirpath = Path(dirpath)
    meta_path = dirpath / "activations_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    acts = ActivationSet(
        d_model=meta.get("d_model", 0),
        n_heads=meta.get("n_heads", 1),
        sample_count=meta.get("sample_count", 0),
        sequence_length=meta.get("sequence_length", 0),
        source=meta.get("source", ""),
    )
    files = sorted(dirpath.glob("*.ktac"))
    if not files:
        raise FileFormatError(f"no KTAC files under {dirpath}")
    for p in files:
        layer, kind, mat = read_ktac(p)
        acts.add(layer, kind, mat)
    return acts


def _tensor_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    d, f = cfg.d_model, cfg.d_ff
    v = cfg.vocab_size if cfg.vocab_size is not None else d
    shapes: list[tuple[str, tuple[int, int]]] = [("embed", (v, d))]
    for i in range(cfg.n_layers):
        shapes += [
            (f"layer{i}.rms1", (1, d)),
            (f"layer{i}.wq", (d, d)),
            (f"layer{i}.wk", (d, d)),
            (f"layer{i}.wv", (d, d)),
            (f"layer{i}.wo", (d, d)),
            (f"layer{i}.rms2", (1, d)),
            (f"layer{i}.wup", (d, f)),
            (f"layer{i}.wgate", (d, f)),
            (f"layer{i}.wdown", (f, d)),
        ]
    shapes += [("final_rms", (1, d)), ("unembed", (d, v))]
    return shapes


def save_model(path, model: DecoderModel) -> None:
    cfg = model.config
    online = model.online
    header = _KTWT_HEADER.pack(
        KTWT_MAGIC, FORMAT_VERSION, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_layers,
        cfg.vocab_size or 0, 1 if model.scales_folded else 0,
        -1 if online.r3 is None else online.r3,
        -1 if online.r4 is None else online.r4,
        -1 if online.r5 is None else online.r5,
        cfg.rope_base, cfg.rms_eps,
    )
    tensors = [model.embed]
    for layer in model.layers:
        tensors += [layer.rms1, layer.wq, layer.wk, layer.wv, layer.wo,
                    layer.rms2, layer.wup, layer.wgate, layer.wdown]
    tensors += [model.final_rms, model.unembed]
    with open(path, "wb") as f:
        f.write(header)
        for t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_model_header(path) -> tuple[ModelConfig, bool, OnlineModes]:
    with open(path, "rb") as f:
        raw = f.read(_KTWT_HEADER.size)
    if len(raw) < _KTWT_HEADER.size:
        raise FileFormatError(f"{path}: truncated header")
    (magic, version, d_model, n_heads, d_ff, n_layers, vocab, flags,
     r3, r4, r5, rope_base, rms_eps) = _KTWT_HEADER.unpack(raw)
    if magic != KTWT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    cfg = ModelConfig(
        d_model=d_model, n_heads=n_heads, d_ff=d_ff, n_layers=n_layers,
        rope_base=rope_base, vocab_size=vocab or None, rms_eps=rms_eps,
    )
    online = OnlineModes(
        r3=None if r3 < 0 else int(r3),
        r4=None if r4 < 0 else int(r4),
        r5=None if r5 < 0 else int(r5),
    )
    return cfg, bool(flags & 1), online


def _read_tensor(f, shape) -> np.ndarray:
    n = shape[0] * shape[1]
    data = np.frombuffer(f.read(n * 4), dtype="<f4")
    if data.size != n:
        raise FileFormatError("truncated tensor payload")
    arr = data.astype(np.float64).reshape(shape)
    return arr[0] if shape[0] == 1 else arr


def load_model(path) -> DecoderModel:
    cfg, folded, online = read_model_header(path)
    shapes = _tensor_shapes(cfg)
    with open(path, "rb") as f:
        f.seek(_KTWT_HEADER.size)
        tensors = {name: _read_tensor(f, shape) for name, shape in shapes}
    layers = [
        LayerWeights(
            wq=tensors[f"layer{i}.wq"], wk=tensors[f"layer{i}.wk"],
            wv=tensors[f"layer{i}.wv"], wo=tensors[f"layer{i}.wo"],
            wup=tensors[f"layer{i}.wup"], wgate=tensors[f"layer{i}.wgate"],
            wdown=tensors[f"layer{i}.wdown"],
            rms1=tensors[f"layer{i}.rms1"], rms2=tensors[f"layer{i}.rms2"],
        )
        for i in range(cfg.n_layers)
    ]
    return DecoderModel(
        config=cfg, embed=tensors["embed"], layers=layers,
        final_rms=tensors["final_rms"], unembed=tensors["unembed"],
        scales_folded=folded, online=online,
        r4_folded=online.r4, r5_folded=online.r5,
    )


def load_named_tensor(path, name: str) -> np.ndarray:
    """Read one tensor by its name in the fixed KTWT order."""
    cfg, _, _ = read_model_header(path)
    offset = _KTWT_HEADER.size
    for tname, shape in _tensor_shapes(cfg):
        if tname == name:
            with open(path, "rb") as f:
                f.seek(offset)
                return _read_tensor(f, shape)
        offset += shape[0] * shape[1] * 4
    raise FileFormatError(f"no tensor named {name!r}")


def load_layer(path, index: int) -> LayerWeights:
    """Read a single layer's tensors without materializing the whole model."""
    cfg, _, _ = read_model_header(path)
    if not 0 <= index < cfg.n_layers:
        raise FileFormatError(f"layer {index} out of range")
    shapes = _tensor_shapes(cfg)
    offset = _KTWT_HEADER.size
    wanted = {}
    prefix = f"layer{index}."
    for name, shape in shapes:
        size = shape[0] * shape[1] * 4
        if name.startswith(prefix):
            wanted[name[len(prefix):]] = (offset, shape)
        offset += size
    with open(path, "rb") as f:
        tensors = {}
        for key, (off, shape) in wanted.items():
            f.seek(off)
            tensors[key] = _read_tensor(f, shape)
    return LayerWeights(**tensors)


def save_rotation(path, q: np.ndarray) -> None:
    np.save(path, np.asarray(q, dtype=np.float64))


def load_rotation(path) -> np.ndarray:
    return np.load(path)
