"""A small decoder-only transformer built for rotation experiments.

RMSNorm + rotary attention + SwiGLU, all in float64 numpy, with:

- scale folding (RMSNorm weights absorbed into the next linear layers),
- fusion of the residual-stream rotation and per-layer value rotations into
  the weights at zero inference cost,
- online sign-randomized Hadamard rotations on the RoPE'd queries/keys, the
  attention output, and the FFN hidden state (their inverses folded into the
  following projections where needed),
- simulated quantization at the points where a low-bit deployment would
  quantize: post-norm block inputs, the key/value cache, and the inputs of
  the output/down projections.

Weights follow the math convention (d_in, d_out); activations are one token
per row and layers compute ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    DimensionError,
    OrthogonalMatrix,
    fast_hadamard_transform,
    hadamard_dense,
    random_signs,
)
from .quant import QuantSpec, quantize_dequantize
from .rotor import ActivationSet


class ModelError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_layers: int = 4
    rope_base: float = 10000.0
    vocab_size: int | None = None  # None: model consumes pre-embedded inputs
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        hd = self.d_model // self.n_heads
        for name, n in (("d_model", self.d_model), ("head_dim", hd), ("d_ff", self.d_ff)):
            if not _is_pow2(n):
                raise ModelError(f"{name}={n} must be a power of two for online rotations")
        if self.rope_base <= 1.0:
            raise ModelError("rope_base must exceed 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wup: np.ndarray
    wgate: np.ndarray
    wdown: np.ndarray
    rms1: np.ndarray
    rms2: np.ndarray

    def copy(self) -> "LayerWeights":
        return LayerWeights(*(getattr(self, f).copy() for f in LINEAR_NAMES), self.rms1.copy(),
                            self.rms2.copy())


LINEAR_NAMES = ("wq", "wk", "wv", "wo", "wup", "wgate", "wdown")


@dataclass(frozen=True)
class OnlineModes:
    """Seeds of the active online Hadamard rotations; None means off."""

    r3: int | None = None
    r4: int | None = None
    r5: int | None = None


@dataclass(frozen=True)
class RotationSet:
    """Everything fuse_rotations needs: the fusible rotations plus online modes."""

    r1: OrthogonalMatrix | None = None
    r2: tuple[OrthogonalMatrix, ...] | None = None  # one per layer
    online: OnlineModes = OnlineModes()


@dataclass
class DecoderModel:
    config: ModelConfig
    embed: np.ndarray  # (vocab, d) or (d, d) in direct mode
    layers: list[LayerWeights]
    final_rms: np.ndarray
    unembed: np.ndarray  # (d, vocab) or (d, d)
    scales_folded: bool = False
    online: OnlineModes = field(default_factory=OnlineModes)
    r4_folded: int | None = None  # seed whose inverse is folded into wo
    r5_folded: int | None = None  # seed whose inverse is folded into wdown

    def copy(self) -> "DecoderModel":
        return DecoderModel(
            config=self.config,
            embed=self.embed.copy(),
            layers=[layer.copy() for layer in self.layers],
            final_rms=self.final_rms.copy(),
            unembed=self.unembed.copy(),
            scales_folded=self.scales_folded,
            online=self.online,
            r4_folded=self.r4_folded,
            r5_folded=self.r5_folded,
        )


def random_layer(config: ModelConfig, seed: int, index: int) -> LayerWeights:
    """Layer weights from an independent per-layer stream, so the layer-wise
    capture path can materialize one layer at a time."""
    rng = np.random.default_rng([seed, index + 1])
    d, f = config.d_model, config.d_ff
    return LayerWeights(
        wq=rng.standard_normal((d, d)) / np.sqrt(d),
        wk=rng.standard_normal((d, d)) / np.sqrt(d),
        wv=rng.standard_normal((d, d)) / np.sqrt(d),
        wo=rng.standard_normal((d, d)) / np.sqrt(d),
        wup=rng.standard_normal((d, f)) / np.sqrt(d),
        wgate=rng.standard_normal((d, f)) / np.sqrt(d),
        wdown=rng.standard_normal((f, d)) / np.sqrt(f),
        rms1=rng.uniform(0.5, 1.5, d),
        rms2=rng.uniform(0.5, 1.5, d),
    )


def outlier_channels(config: ModelConfig, seed: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, 7]).choice(config.d_model, size=count, replace=False)


def random_non_layer_params(
    config: ModelConfig, seed: int, embed_structure: str = "gaussian"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(embed, final_rms, unembed) from the model's non-layer stream.

    embed_structure "mixed_sources" builds token embeddings from mostly
    uniform (plus some gaussian) independent sources mixed through a hidden
    rotation: non-gaussian channel structure a fixed random rotation cannot
    exploit but a learned one can, akin to real activation statistics.
    """
    rng = np.random.default_rng([seed, 0])
    d = config.d_model
    if config.vocab_size is None:
        embed = np.eye(d)
        unembed = np.eye(d)
    elif embed_structure in ("mixed_sources", "uniform_sources"):
        n_uniform = d if embed_structure == "uniform_sources" else (3 * d) // 4
        z = np.empty((config.vocab_size, d))
        z[:, :n_uniform] = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), (config.vocab_size, n_uniform))
        z[:, n_uniform:] = rng.standard_normal((config.vocab_size, d - n_uniform))
        mix = np.linalg.qr(rng.standard_normal((d, d)))[0]
        embed = (z @ mix) / np.sqrt(d)
        unembed = rng.standard_normal((d, config.vocab_size)) / np.sqrt(d)
    elif embed_structure == "gaussian":
        embed = rng.standard_normal((config.vocab_size, d)) / np.sqrt(d)
        unembed = rng.standard_normal((d, config.vocab_size)) / np.sqrt(d)
    else:
        raise ModelError(f"unknown embed structure {embed_structure!r}")
    final_rms = rng.uniform(0.5, 1.5, d)
    return embed, final_rms, unembed


def plant_layer_outliers(layer: LayerWeights, cols: np.ndarray, scale: float) -> LayerWeights:
    """Amplify the chosen residual/value channels of one layer (in place)."""
    layer.wo[:, cols] *= scale
    layer.wdown[:, cols] *= scale
    layer.wv[:, cols] *= scale
    return layer


def random_model(
    config: ModelConfig,
    seed: int,
    planted_outliers: bool = False,
    n_outlier_channels: int = 2,
    outlier_scale: float = 50.0,
    outlier_site: str = "both",  # embed | projections | both
    embed_structure: str = "gaussian",
) -> DecoderModel:
    """Seeded toy decoder; 1/sqrt(fan_in) init.

    With planted_outliers a few residual-stream channels are amplified, the
    synthetic stand-in for LLM outlier channels. Site "embed" scales token
    embedding columns only (activation outliers, weight matrices untouched);
    "projections" scales the value/output/down projection columns writing to
    those channels; "both" does both. Direct-embedding models have no
    embedding to scale, so "embed" is a no-op there.
    """
    embed, final_rms, unembed = random_non_layer_params(config, seed, embed_structure)
    layers = [random_layer(config, seed, i) for i in range(config.n_layers)]
    model = DecoderModel(config, embed, layers, final_rms, unembed)
    if planted_outliers:
        if outlier_site not in ("embed", "projections", "both"):
            raise ModelError(f"unknown outlier site {outlier_site!r}")
        cols = outlier_channels(config, seed, n_outlier_channels)
        if outlier_site in ("embed", "both") and config.vocab_size is not None:
            model.embed[:, cols] *= outlier_scale
        if outlier_site in ("projections", "both"):
            for layer in model.layers:
                plant_layer_outliers(layer, cols, outlier_scale)
    return model


def _rmsnorm(x: np.ndarray, scale: np.ndarray, eps: float) -> np.ndarray:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / r * scale


def fold_layer(layer: LayerWeights) -> LayerWeights:
    """Absorb this layer's RMSNorm scales into its linear weights (in place)."""
    g1 = layer.rms1[:, None]
    layer.wq *= g1
    layer.wk *= g1
    layer.wv *= g1
    layer.rms1 = np.ones_like(layer.rms1)
    g2 = layer.rms2[:, None]
    layer.wup *= g2
    layer.wgate *= g2
    layer.rms2 = np.ones_like(layer.rms2)
    return layer


def fold_rmsnorm(model: DecoderModel) -> DecoderModel:
    """Absorb RMSNorm scales into the following linear weights.

    diag(gamma) moves into the rows of wq/wk/wv (attention norm), wup/wgate
    (FFN norm), and the unembedding (final norm); all scales become 1. Full
    precision outputs are unchanged. Idempotent.
    """
    out = model.copy()
    for layer in out.layers:
        fold_layer(layer)
    out.unembed = out.final_rms[:, None] * out.unembed
    out.final_rms = np.ones_like(out.final_rms)
    out.scales_folded = True
    return out


def fuse_rotations(model: DecoderModel, rotations: RotationSet) -> DecoderModel:
    """Fold the fusible rotations into the weights; record the online modes.

    The residual-stream rotation multiplies the embedding (and every input
    projection by its inverse, every residual-writing projection on the
    output side); the per-layer value rotation moves between wv and wo. When
    an online attention-output / FFN-hidden rotation is requested, its
    inverse is folded into wo / wdown here and the forward pass applies the
    rotation itself via the fast transform.
    """
    if not model.scales_folded:
        raise ModelError("fold_rmsnorm must run before fuse_rotations")
    cfg = model.config
    out = model.copy()
    r1 = rotations.r1.q if rotations.r1 is not None else None
    if r1 is not None and r1.shape != (cfg.d_model, cfg.d_model):
        raise DimensionError(f"residual rotation must be {cfg.d_model}x{cfg.d_model}")
    r2s = rotations.r2
    if r2s is not None and len(r2s) != cfg.n_layers:
        raise ModelError(f"need one value rotation per layer ({cfg.n_layers})")

    if r1 is not None:
        out.embed = out.embed @ r1
        out.unembed = r1.T @ out.unembed
    for i, layer in enumerate(out.layers):
        if r1 is not None:
            layer.wq = r1.T @ layer.wq
            layer.wk = r1.T @ layer.wk
            layer.wv = r1.T @ layer.wv
            layer.wup = r1.T @ layer.wup
            layer.wgate = r1.T @ layer.wgate
            layer.wo = layer.wo @ r1
            layer.wdown = layer.wdown @ r1
        if r2s is not None:
            r2 = r2s[i].q
            if r2.shape != (cfg.d_model, cfg.d_model):
                raise DimensionError(f"value rotation must be {cfg.d_model}x{cfg.d_model}")
            layer.wv = layer.wv @ r2
            layer.wo = r2.T @ layer.wo
    online = rotations.online
    if online.r4 is not None:
        h = hadamard_dense(cfg.d_model)
        s4 = random_signs(cfg.d_model, online.r4)
        for layer in out.layers:
            layer.wo = h @ (s4[:, None] * layer.wo)
        out.r4_folded = online.r4
    if online.r5 is not None:
        h = hadamard_dense(cfg.d_ff)
        s5 = random_signs(cfg.d_ff, online.r5)
        for layer in out.layers:
            layer.wdown = h @ (s5[:, None] * layer.wdown)
        out.r5_folded = online.r5
    out.online = online
    return out


def rope_apply(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotary embedding on the last axis, interleaved (2i, 2i+1) pairs.

    Position 0 is the identity; each pair is rotated by pos * base^(-2i/dim),
    so row norms are preserved exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise ModelError("rotary dimension must be even")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    # angles: (tokens, dim/2); broadcast over any head axes in between
    angles = positions[:, None] * freqs[None, :]
    shape = [x.shape[0]] + [1] * (x.ndim - 2) + [dim // 2]
    cos = np.cos(angles).reshape(shape)
    sin = np.sin(angles).reshape(shape)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass(frozen=True)
class QuantConfigSet:
    """Which tensors get simulated quantization during a forward pass."""

    activation: QuantSpec = QuantSpec(4, "symmetric", "per_token", clip_quantile=0.98)
    kv: QuantSpec = QuantSpec(4, "asymmetric", "per_token")
    weight_method: str = "rtn"  # rtn | gptq
    weight_bits: int = 4

    def __post_init__(self):
        if self.weight_method not in ("rtn", "gptq"):
            raise ModelError(f"unknown weight method {self.weight_method!r}")


def forward(
    model: DecoderModel,
    inputs: np.ndarray,
    positions: np.ndarray | None = None,
    quant: QuantConfigSet | None = None,
    online: OnlineModes | None = None,
    capture: ActivationSet | None = None,
    collector=None,
) -> np.ndarray:
    """Causal decoder forward pass for one sequence.

    inputs: int token ids (vocab mode) or a (tokens, d_model) matrix. With a
    quant config the forward quantize-dequantizes activations at the block
    inputs, keys after the online rotation, values into the cache, and the
    wo/wdown inputs; weights are expected to be pre-quantized separately.
    capture receives the pre-norm block inputs and value projections;
    collector (if any) sees every linear layer input for Hessian estimation.
    """
    cfg = model.config
    online = model.online if online is None else online
    if online.r4 is not None and online.r4 != model.r4_folded:
        raise ModelError("online attention-output rotation requested but not folded into wo")
    if online.r5 is not None and online.r5 != model.r5_folded:
        raise ModelError("online FFN rotation requested but not folded into wdown")
    if model.r4_folded is not None and online.r4 != model.r4_folded:
        raise ModelError("wo carries a folded rotation; pass the matching online mode")
    if model.r5_folded is not None and online.r5 != model.r5_folded:
        raise ModelError("wdown carries a folded rotation; pass the matching online mode")

    if np.issubdtype(np.asarray(inputs).dtype, np.integer):
        if cfg.vocab_size is None:
            raise ModelError("token ids passed to a direct-embedding model")
        h = model.embed[np.asarray(inputs)]
    else:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.d_model:
            raise DimensionError(f"direct inputs must be (tokens, {cfg.d_model})")
        h = x @ model.embed
    t = h.shape[0]
    positions = np.arange(t) if positions is None else np.asarray(positions)
    if positions.shape != (t,):
        raise DimensionError("positions must have one entry per token")

    for li, layer in enumerate(model.layers):
        h = layer_forward(
            cfg, layer, h, positions, li=li, quant=quant, online=online,
            capture=capture, collector=collector,
        )
    h = _rmsnorm(h, model.final_rms, cfg.rms_eps)
    return h @ model.unembed


def layer_forward(
    cfg: ModelConfig,
    layer: LayerWeights,
    h: np.ndarray,
    positions: np.ndarray,
    li: int = 0,
    quant: QuantConfigSet | None = None,
    online: OnlineModes = OnlineModes(),
    capture: ActivationSet | None = None,
    collector=None,
) -> np.ndarray:
    """One decoder layer on one sequence's residual stream.

    Shared by the monolithic forward pass and the layer-at-a-time capture
    path, which keeps only one layer's weights resident.
    """
    t = h.shape[0]
    s3 = random_signs(cfg.head_dim, online.r3) if online.r3 is not None else None
    s4 = random_signs(cfg.d_model, online.r4) if online.r4 is not None else None
    s5 = random_signs(cfg.d_ff, online.r5) if online.r5 is not None else None
    mask = np.triu(np.full((t, t), -np.inf), k=1)

    def qdq_act(a):
        return quantize_dequantize(a, quant.activation) if quant is not None else a

    def qdq_kv(a):
        return quantize_dequantize(a, quant.kv) if quant is not None else a

    if capture is not None:
        capture.add(li, "mhsa_input", h.copy())
    a = qdq_act(_rmsnorm(h, layer.rms1, cfg.rms_eps))
    if collector is not None:
        collector.add(li, "qkv", a)
    q = a @ layer.wq
    k = a @ layer.wk
    v = a @ layer.wv
    if capture is not None:
        capture.add(li, "value_output", v.copy())
    qh = rope_apply(q.reshape(t, cfg.n_heads, cfg.head_dim), positions, cfg.rope_base)
    kh = rope_apply(k.reshape(t, cfg.n_heads, cfg.head_dim), positions, cfg.rope_base)
    if s3 is not None:
        qh = fast_hadamard_transform(qh * s3)
        kh = fast_hadamard_transform(kh * s3)
    kh = qdq_kv(kh.reshape(t, cfg.d_model)).reshape(t, cfg.n_heads, cfg.head_dim)
    vh = qdq_kv(v).reshape(t, cfg.n_heads, cfg.head_dim)
    o = np.empty((t, cfg.n_heads, cfg.head_dim))
    inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)
    for hi in range(cfg.n_heads):
        scores = (qh[:, hi, :] @ kh[:, hi, :].T) * inv_sqrt + mask
        o[:, hi, :] = _softmax_rows(scores) @ vh[:, hi, :]
    o = o.reshape(t, cfg.d_model)
    if s4 is not None:
        o = fast_hadamard_transform(o * s4)
    o = qdq_act(o)
    if collector is not None:
        collector.add(li, "o", o)
    h = h + o @ layer.wo
    if capture is not None:
        capture.add(li, "ffn_input", h.copy())
    a2 = qdq_act(_rmsnorm(h, layer.rms2, cfg.rms_eps))
    if collector is not None:
        collector.add(li, "upgate", a2)
    hidden = (a2 @ layer.wup) * _silu(a2 @ layer.wgate)
    if s5 is not None:
        hidden = fast_hadamard_transform(hidden * s5)
    hidden = qdq_act(hidden)
    if collector is not None:
        collector.add(li, "down", hidden)
    return h + hidden @ layer.wdown


def invariance_report(
    model_plain: DecoderModel,
    model_rotated: DecoderModel,
    inputs_list: list[np.ndarray],
) -> float:
    """Max relative output deviation over the inputs, full precision."""
    worst = 0.0
    for x in inputs_list:
        ref = forward(model_plain, x)
        got = forward(model_rotated, x)
        if ref.shape != got.shape:
            raise DimensionError("models produce different output shapes")
        worst = max(worst, float(np.max(np.abs(got - ref) / (np.abs(ref) + 1e-9))))
    return worst


def success_rate(base_acts: ActivationSet, bench_acts: ActivationSet) -> dict[str, float]:
    """Per block kind: % of tokens whose post-rotation max |value| strictly
    beats the baseline's. Token sets must align one to one."""
    base = {(r.layer, r.block_kind): r.tokens for r in base_acts.records}
    bench = {(r.layer, r.block_kind): r.tokens for r in bench_acts.records}
    if base.keys() != bench.keys():
        raise ModelError("activation sets cover different (layer, block) records")
    kinds: dict[str, list[np.ndarray]] = {}
    for key, b in base.items():
        c = bench[key]
        if b.shape[0] != c.shape[0]:
            raise ModelError(f"token counts differ for {key}")
        win = np.max(np.abs(c), axis=1) < np.max(np.abs(b), axis=1)
        kinds.setdefault(key[1], []).append(win)
    return {
        kind: 100.0 * float(np.mean(np.concatenate(wins))) for kind, wins in kinds.items()
    }
