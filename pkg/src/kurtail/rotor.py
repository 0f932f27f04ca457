"""Learning the fusible rotations from captured activations.

The global rotation (shared by every layer, fused into the residual stream)
trains on the pooled pre-norm inputs of the attention and FFN blocks through
a proxy of what the rotated network computes at the quantization point:
``rmsnorm(x @ R)`` with unit scale. The per-layer value rotation trains the
same way on value projections, without the norm, as one shared head-size
block replicated across heads (a dense full-width rotation would not commute
with per-head attention).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .linalg import OrthogonalMatrix, random_orthogonal, randomized_hadamard
from .manifold import CayleyState, cayley_adam_step, cosine_lr
from .stats import UNIFORM_KURTOSIS, kurtosis, kurtosis_loss_gradient

BLOCK_KINDS = ("mhsa_input", "ffn_input", "value_output")


class ActivationError(ValueError):
    pass


@dataclass(frozen=True)
class ActRecord:
    """One captured token-by-channel matrix."""

    layer: int
    block_kind: str
    tokens: np.ndarray

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ActivationError(f"unknown block kind {self.block_kind!r}")
        t = np.asarray(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] == 0:
            raise ActivationError("tokens must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(t)):
            raise ActivationError("activation record contains non-finite values")
        object.__setattr__(self, "tokens", t)


@dataclass
class ActivationSet:
    """Captured activations plus the model dims they came from."""

    records: list[ActRecord] = field(default_factory=list)
    d_model: int = 0
    n_heads: int = 1
    sample_count: int = 0
    sequence_length: int = 0
    source: str = ""

    def add(self, layer: int, block_kind: str, tokens: np.ndarray) -> None:
        rec = ActRecord(layer, block_kind, tokens)
        if self.records:
            same = [r for r in self.records if r.block_kind == block_kind]
            if same and same[0].tokens.shape[1] != rec.tokens.shape[1]:
                raise ActivationError(
                    f"channel count mismatch for {block_kind}: "
                    f"{rec.tokens.shape[1]} vs {same[0].tokens.shape[1]}"
                )
        self.records.append(rec)

    def groups(self, kinds: tuple[str, ...]) -> list[tuple[int, str, np.ndarray]]:
        """(layer, kind, stacked tokens) per layer/kind, deterministic order."""
        out = []
        for layer in sorted({r.layer for r in self.records}):
            for kind in kinds:
                mats = [r.tokens for r in self.records if r.layer == layer and r.block_kind == kind]
                if mats:
                    out.append((layer, kind, np.vstack(mats)))
        return out

    def layers(self) -> list[int]:
        return sorted({r.layer for r in self.records})


@dataclass(frozen=True)
class ProxyNet:
    """Rotation followed by an optional unit-scale RMSNorm."""

    rotation: OrthogonalMatrix
    use_rmsnorm: bool = True
    rmsnorm_epsilon: float = 1e-6


def _rms_rows(z: np.ndarray, eps: float) -> np.ndarray:
    return np.sqrt(np.mean(z * z, axis=1, keepdims=True) + eps)


def proxy_forward(x: np.ndarray, net: ProxyNet) -> np.ndarray:
    """y = rmsnorm(x @ R) per row, or just x @ R without the norm."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.rotation.n:
        raise ActivationError(
            f"input with {x.shape[-1] if x.ndim == 2 else '?'} channels does not "
            f"match rotation dim {net.rotation.n}"
        )
    z = x @ net.rotation.q
    if not net.use_rmsnorm:
        return z
    return z / _rms_rows(z, net.rmsnorm_epsilon)


def proxy_backward(x: np.ndarray, net: ProxyNet, upstream: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the rotation entries.

    upstream is dLoss/dy at the proxy output. Verified against central finite
    differences in the test suite.
    """
    x = np.asarray(x, dtype=np.float64)
    g_y = np.asarray(upstream, dtype=np.float64)
    if g_y.shape != (x.shape[0], net.rotation.n):
        raise ActivationError(f"upstream shape {g_y.shape} does not match output")
    if not net.use_rmsnorm:
        return x.T @ g_y
    z = x @ net.rotation.q
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < 1e-10):
        raise ActivationError("degenerate (near-zero) row in proxy input")
    d = z.shape[1]
    r = _rms_rows(z, net.rmsnorm_epsilon)
    dot = np.sum(g_y * z, axis=1, keepdims=True)
    g_z = g_y / r - z * (dot / (d * r**3))
    return x.T @ g_z


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for the rotation-training loop; defaults are the desk-scale run."""

    iterations: int = 100
    batch_groups: int = 8
    batch_tokens: int = 1024
    eval_tokens: int = 4096
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    cayley_iterations: int = 3
    init: str = "random"  # random | hadamard | identity
    seed: int = 0
    init_seed: int | None = None  # rotation-init stream; defaults to seed
    kappa_u: float = UNIFORM_KURTOSIS

    def __post_init__(self):
        if self.init not in ("random", "hadamard", "identity"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")


@dataclass
class TrainResult:
    rotation: OrthogonalMatrix
    losses: np.ndarray  # reference-batch loss per iteration, index 0 = initial
    best_iteration: int
    head_rotation: OrthogonalMatrix | None = None  # set for the value rotation


def _initial_rotation(dim: int, cfg: TrainConfig) -> OrthogonalMatrix:
    seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
    if cfg.init == "identity":
        return OrthogonalMatrix(np.eye(dim))
    if cfg.init == "hadamard":
        return randomized_hadamard(dim, seed)
    return random_orthogonal(dim, seed)


def _train_rotation(
    group_mats: list[np.ndarray],
    dim: int,
    use_rmsnorm: bool,
    cfg: TrainConfig,
) -> TrainResult:
    """Shared minibatch Cayley-Adam loop over activation groups.

    Every iteration scores the current rotation on a fixed seeded reference
    batch; the returned rotation is the best-scoring one, so the final logged
    loss can never exceed the initial one.
    """
    if not group_mats:
        raise ActivationError("empty activation set")
    rng = np.random.default_rng(cfg.seed)
    reference = [
        m[rng.choice(m.shape[0], size=min(cfg.eval_tokens, m.shape[0]), replace=False)]
        for m in group_mats
    ]

    rotation = _initial_rotation(dim, cfg)
    state = CayleyState(
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, cayley_iterations=cfg.cayley_iterations
    )

    def reference_loss(rot: OrthogonalMatrix) -> float:
        net = ProxyNet(rot, use_rmsnorm)
        total = 0.0
        for m in reference:
            y = proxy_forward(m, net)
            total += abs(kurtosis(y.ravel()).kappa - cfg.kappa_u)
        return total / len(reference)

    losses = np.zeros(cfg.iterations + 1)
    losses[0] = reference_loss(rotation)
    best_loss, best_rot, best_iter = losses[0], rotation, 0

    n_groups = len(group_mats)
    for it in range(cfg.iterations):
        take = min(cfg.batch_groups, n_groups)
        picked = rng.choice(n_groups, size=take, replace=False)
        grad = np.zeros((dim, dim))
        net = ProxyNet(rotation, use_rmsnorm)
        for gi in picked:
            m = group_mats[gi]
            rows = rng.choice(m.shape[0], size=min(cfg.batch_tokens, m.shape[0]), replace=False)
            x = m[rows]
            y = proxy_forward(x, net)
            loss_g, g_flat = kurtosis_loss_gradient(y.ravel(), cfg.kappa_u)
            if not np.isfinite(loss_g):
                raise ActivationError("non-finite training loss")
            grad += proxy_backward(x, net, g_flat.reshape(y.shape)) / take
        rotation = cayley_adam_step(
            rotation, grad, state, lr=cosine_lr(cfg.lr, it, cfg.iterations)
        )
        losses[it + 1] = reference_loss(rotation)
        if losses[it + 1] < best_loss:
            best_loss, best_rot, best_iter = losses[it + 1], rotation, it + 1
    return TrainResult(rotation=best_rot, losses=losses, best_iteration=best_iter)


def train_r1(acts: ActivationSet, cfg: TrainConfig) -> TrainResult:
    """Global residual-stream rotation from pooled attention + FFN inputs.

    Groups stay separated per (layer, block) for the loss; every group flows
    through rmsnorm(x @ R) because that is what the fused network quantizes.
    """
    groups = acts.groups(("mhsa_input", "ffn_input"))
    if not {k for _, k, _ in groups} >= {"mhsa_input", "ffn_input"}:
        raise ActivationError("need both mhsa_input and ffn_input records")
    dim = groups[0][2].shape[1]
    return _train_rotation([m for _, _, m in groups], dim, True, cfg)


def train_r2(acts: ActivationSet, layer: int, cfg: TrainConfig) -> TrainResult:
    """Per-layer value rotation, trained without the norm on head-size slices.

    The learned block is shared across heads and returned expanded to the
    full width (kron with the identity over heads), which is the form that
    fuses into the value/output projections.
    """
    mats = [r.tokens for r in acts.records if r.layer == layer and r.block_kind == "value_output"]
    if not mats:
        raise ActivationError(f"no value_output records for layer {layer}")
    full = np.vstack(mats)
    d_model = full.shape[1]
    heads = max(acts.n_heads, 1)
    if d_model % heads != 0:
        raise ActivationError(f"channel count {d_model} not divisible by {heads} heads")
    head_dim = d_model // heads
    per_head = full.reshape(-1, heads, head_dim).reshape(-1, head_dim)
    result = _train_rotation([per_head], head_dim, False, cfg)
    expanded = OrthogonalMatrix(np.kron(np.eye(heads), result.rotation.q))
    return TrainResult(
        rotation=expanded,
        losses=result.losses,
        best_iteration=result.best_iteration,
        head_rotation=result.rotation,
    )


def save_training_log(path, losses: np.ndarray) -> None:
    """CSV with (iteration, loss) rows; iteration 0 is the pre-training loss."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, repr(float(v))])
