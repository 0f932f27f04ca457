"""Hessian-aware weight quantization with greedy error feedback.

Weights are (d_in, d_out) with per-output-channel symmetric scales, fixed
from the unmodified weights. The recursion walks input coordinates in order,
quantizing one coordinate for every output channel at once and pushing the
weighted residual into the not-yet-quantized coordinates via the Cholesky
factor of the inverse Hessian. Whole-matrix blocks only; desk scale needs no
lazy batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix
from .quant import QuantSpec, QuantizedTensor
from .rotor import ActivationSet

DEFAULT_DAMPING_FRACTION = 0.01


class GptqError(RuntimeError):
    pass


@dataclass(frozen=True)
class HessianEstimate:
    """H = (2/N) X^T X + damping * mean(diag) * I for a linear layer's inputs."""

    h: np.ndarray
    sample_count: int
    damping: float

    def __post_init__(self):
        h = as_matrix(self.h, "h")
        if h.shape[0] != h.shape[1]:
            raise GptqError("Hessian must be square")
        if np.max(np.abs(h - h.T)) > 1e-10 * max(1.0, float(np.max(np.abs(h)))):
            raise GptqError("Hessian must be symmetric")
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.h.shape[0]


def _finalize_hessian(sum_xtx: np.ndarray, count: int, damping_fraction: float) -> HessianEstimate:
    if count == 0:
        raise GptqError("no calibration rows collected")
    h = (2.0 / count) * sum_xtx
    lam = damping_fraction * float(np.mean(np.diag(h)))
    h = h + lam * np.eye(h.shape[0])
    return HessianEstimate(h=h, sample_count=count, damping=lam)


def collect_hessian(
    acts: ActivationSet | np.ndarray | list[np.ndarray],
    damping_fraction: float = DEFAULT_DAMPING_FRACTION,
) -> HessianEstimate:
    """Accumulate the input-covariance Hessian from calibration activations."""
    if isinstance(acts, ActivationSet):
        mats = [r.tokens for r in acts.records]
    elif isinstance(acts, np.ndarray):
        mats = [acts]
    else:
        mats = list(acts)
    if not mats:
        raise GptqError("empty calibration set")
    dim = np.asarray(mats[0]).shape[1]
    sum_xtx = np.zeros((dim, dim))
    count = 0
    for m in mats:
        x = as_matrix(m, "activations")
        if x.shape[1] != dim:
            raise GptqError(f"activation dim {x.shape[1]} != {dim}")
        sum_xtx += x.T @ x
        count += x.shape[0]
    return _finalize_hessian(sum_xtx, count, damping_fraction)


class HessianCollector:
    """Streaming X^T X accumulator keyed by (layer, linear name).

    Plugged into the decoder forward pass so GPTQ calibration never stores
    raw activations.
    """

    def __init__(self, damping_fraction: float = DEFAULT_DAMPING_FRACTION):
        self.damping_fraction = damping_fraction
        self._sums: dict[tuple[int, str], np.ndarray] = {}
        self._counts: dict[tuple[int, str], int] = {}

    def add(self, layer: int, name: str, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        key = (layer, name)
        if key not in self._sums:
            self._sums[key] = np.zeros((x.shape[1], x.shape[1]))
            self._counts[key] = 0
        self._sums[key] += x.T @ x
        self._counts[key] += x.shape[0]

    def finalize(self) -> dict[tuple[int, str], HessianEstimate]:
        return {
            key: _finalize_hessian(self._sums[key], self._counts[key], self.damping_fraction)
            for key in sorted(self._sums)
        }


def gptq_quantize(
    w: np.ndarray,
    h: HessianEstimate,
    bits: int = 4,
    act_order: bool = False,
) -> QuantizedTensor:
    """Quantize (d_in, d_out) weights against the input Hessian.

    Scales are the plain per-column symmetric ones of the original weights,
    so an identity Hessian reproduces round-to-nearest bit for bit. act_order
    processes input coordinates by descending Hessian diagonal instead of
    storage order.
    """
    w = as_matrix(w, "w")
    d_in = w.shape[0]
    if h.dim != d_in:
        raise GptqError(f"Hessian dim {h.dim} != weight input dim {d_in}")
    qmax = 2 ** (bits - 1) - 1
    scales = np.max(np.abs(w), axis=0) / qmax
    scales = np.where(scales == 0.0, 1.0, scales)

    work = w.copy()
    hm = h.h.copy()
    dead = np.diag(hm) == 0.0
    if np.any(dead):
        hm[dead, dead] = 1.0
        work[dead, :] = 0.0

    if act_order:
        perm = np.argsort(-np.diag(hm), kind="stable")
    else:
        perm = np.arange(d_in)
    work = work[perm]
    hm = hm[perm][:, perm]

    try:
        np.linalg.cholesky(hm)
    except np.linalg.LinAlgError as e:
        raise GptqError("Hessian not positive definite; increase damping") from e
    hinv = np.linalg.inv(hm)
    hinv = 0.5 * (hinv + hinv.T)
    try:
        upper = np.linalg.cholesky(hinv).T
    except np.linalg.LinAlgError as e:
        raise GptqError("inverse-Hessian factorization failed; increase damping") from e

    codes = np.zeros((d_in, w.shape[1]), dtype=np.int32)
    for i in range(d_in):
        row = work[i, :]
        c = np.clip(np.rint(row / scales), -qmax, qmax)
        codes[i] = c.astype(np.int32)
        err = (row - c * scales) / upper[i, i]
        if i + 1 < d_in:
            work[i + 1 :, :] -= np.outer(upper[i, i + 1 :], err)

    inv_perm = np.argsort(perm)
    codes = codes[inv_perm]
    return QuantizedTensor(
        codes=codes,
        scale=scales,
        shift=np.zeros_like(scales),
        spec=QuantSpec(bits, "symmetric", "per_channel"),
        group_axis="col",
    )


def proxy_loss(w: np.ndarray, w_hat: np.ndarray, h: HessianEstimate) -> float:
    """tr(E^T H E) with E = w - w_hat: the data-weighted reconstruction error."""
    e = np.asarray(w) - np.asarray(w_hat)
    return float(np.sum(e * (h.h @ e)))
