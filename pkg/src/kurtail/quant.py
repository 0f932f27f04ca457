"""Uniform k-bit quantizers, quantization MSE, and step-size sensitivity.

Supports symmetric and asymmetric schemes at per-tensor, per-token (row), or
per-channel (column) granularity, with optional quantile clipping of the
range. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    """Quantizer configuration: bit width, scheme, grouping, range clipping.

    clip_quantile < 1 shrinks each group's range to the given empirical
    quantile (of |x| for symmetric, of x for asymmetric) before the scale is
    computed; out-of-range codes are clamped.
    """

    bits: int = 4
    scheme: str = "symmetric"  # symmetric | asymmetric
    granularity: str = "per_tensor"  # per_tensor | per_token | per_channel
    clip_quantile: float = 1.0

    def __post_init__(self):
        if self.bits < 2:
            raise QuantError(f"bits must be >= 2, got {self.bits}")
        if self.scheme not in ("symmetric", "asymmetric"):
            raise QuantError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in ("per_tensor", "per_token", "per_channel"):
            raise QuantError(f"unknown granularity {self.granularity!r}")
        if not 0.0 < self.clip_quantile <= 1.0:
            raise QuantError("clip_quantile must be in (0, 1]")

    @property
    def qmax(self) -> int:
        """Largest code: 2^(k-1)-1 symmetric (the -2^(k-1) code is unused), 2^k-1 asymmetric."""
        if self.scheme == "symmetric":
            return 2 ** (self.bits - 1) - 1
        return 2**self.bits - 1

    @property
    def qmin(self) -> int:
        return -self.qmax if self.scheme == "symmetric" else 0


ACTIVATION_SPEC = QuantSpec(4, "symmetric", "per_token", clip_quantile=0.98)
KV_SPEC = QuantSpec(4, "asymmetric", "per_token")
WEIGHT_SPEC = QuantSpec(4, "symmetric", "per_channel")


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus per-group scale/shift; reconstruct with codes*s + b."""

    codes: np.ndarray  # int32, same shape as the source
    scale: np.ndarray  # one per group
    shift: np.ndarray  # one per group (zeros for symmetric)
    spec: QuantSpec
    group_axis: str  # "tensor" | "row" | "col"


def _group_view(x: np.ndarray, granularity: str) -> tuple[np.ndarray, str]:
    """Reshape so that axis 0 enumerates quantization groups."""
    if granularity == "per_tensor":
        return x.reshape(1, -1), "tensor"
    if granularity == "per_token":
        return x, "row"
    return x.T, "col"


def _group_params(groups: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-group (scale, shift) before code rounding. Degenerate zero-range
    groups get scale 1 so reconstruction stays exact (padded tokens are
    constant rows)."""
    if spec.scheme == "symmetric":
        if spec.clip_quantile < 1.0:
            amax = np.quantile(np.abs(groups), spec.clip_quantile, axis=1)
        else:
            amax = np.max(np.abs(groups), axis=1)
        scale = amax / spec.qmax
        shift = np.zeros_like(scale)
    else:
        if spec.clip_quantile < 1.0:
            hi = np.quantile(groups, spec.clip_quantile, axis=1)
            lo = np.quantile(groups, 1.0 - spec.clip_quantile, axis=1)
        else:
            hi = np.max(groups, axis=1)
            lo = np.min(groups, axis=1)
        scale = (hi - lo) / spec.qmax
        shift = lo
    scale = np.where(scale == 0.0, 1.0, scale)
    return scale, shift


def quantize(x: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    """Round x onto the uniform k-bit grid defined by spec.

    Symmetric: s = max|x| / (2^(k-1)-1), b = 0. Asymmetric: b = min(x),
    s = (max(x)-min(x)) / (2^k-1). Ranges shrink to the clip quantile when
    configured, with codes clamped afterwards.
    """
    x = as_matrix(x, "x")
    groups, axis = _group_view(x, spec.granularity)
    scale, shift = _group_params(groups, spec)
    codes = np.rint((groups - shift[:, None]) / scale[:, None])
    codes = np.clip(codes, spec.qmin, spec.qmax).astype(np.int32)
    if axis == "col":
        codes = codes.T
    elif axis == "tensor":
        codes = codes.reshape(x.shape)
    return QuantizedTensor(codes, scale, shift, spec, axis)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """codes * scale + shift, broadcast over the group axis."""
    c = q.codes.astype(np.float64)
    if q.group_axis == "tensor":
        return c * q.scale[0] + q.shift[0]
    if q.group_axis == "row":
        return c * q.scale[:, None] + q.shift[:, None]
    return c * q.scale[None, :] + q.shift[None, :]


def quantize_dequantize(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(x, spec))


def rtn_quantize_weights(w: np.ndarray, bits: int = 4) -> QuantizedTensor:
    """Round-to-nearest weights: per-column (output channel) symmetric, no clipping."""
    return quantize(w, QuantSpec(bits, "symmetric", "per_channel", clip_quantile=1.0))


def _qdq_symmetric_step(x: np.ndarray, step: float, qmax: int) -> np.ndarray:
    codes = np.clip(np.rint(x / step), -qmax, qmax)
    return codes * step


def quant_mse(x: np.ndarray, spec: QuantSpec, step_override: float | None = None) -> float:
    """Mean of (x - Q(x))^2.

    With step_override the symmetric quantizer runs at exactly that step size
    (single group), which is what the sensitivity sweep perturbs.
    """
    x = np.asarray(x, dtype=np.float64)
    if step_override is not None:
        if step_override <= 0:
            raise QuantError("step_override must be positive")
        qmax = 2 ** (spec.bits - 1) - 1
        err = x - _qdq_symmetric_step(x, step_override, qmax)
    else:
        err = as_matrix(np.atleast_2d(x), "x") - quantize_dequantize(np.atleast_2d(x), spec)
    return float(np.mean(err * err))


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def optimal_step_size(x: np.ndarray, bits: int, rel_tol: float = 1e-4) -> float:
    """Step size minimizing symmetric-quantizer MSE on x.

    Searches [0.1, 1.5] * s_naive (s_naive = max|x| / (2^(k-1)-1)): a coarse
    scan localizes the best basin, then golden-section refines it to the
    requested relative tolerance. MSE(s) is piecewise smooth with local
    minima, so the scan is what makes the bracket trustworthy.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    amax = np.max(np.abs(x))
    if amax == 0.0 or np.min(x) == np.max(x):
        raise QuantError("optimal step size undefined for constant input")
    qmax = 2 ** (bits - 1) - 1
    s_naive = amax / qmax

    def mse(s: float) -> float:
        d = x - _qdq_symmetric_step(x, s, qmax)
        return float(np.mean(d * d))

    grid = np.linspace(0.1 * s_naive, 1.5 * s_naive, 129)
    vals = [mse(s) for s in grid]
    k = int(np.argmin(vals))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]

    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = mse(c), mse(d)
    while (b - a) > rel_tol * s_naive:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = mse(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = mse(d)
    return float((a + b) / 2.0)


@dataclass(frozen=True)
class SensitivityReport:
    """Gamma(alpha) sweep for one sample: MSE increase when the step size is
    moved off its optimum, alpha being the fraction of the optimal step."""

    alphas: tuple[float, ...]
    gamma: tuple[float, ...]
    optimal_step: float
    condition: str = ""
    layer: int = -1
    block: str = ""

    def __post_init__(self):
        if len(self.alphas) != len(self.gamma):
            raise QuantError("alphas and gamma lengths differ")


def sensitivity(
    x: np.ndarray,
    bits: int,
    alphas: tuple[float, ...] | list[float],
    condition: str = "",
    layer: int = -1,
    block: str = "",
) -> SensitivityReport:
    """Gamma(alpha) = |MSE(x, alpha * s_opt) - MSE(x, s_opt)| per alpha.

    alphas must include 1.0, where Gamma is 0 by definition.
    """
    alphas = tuple(float(a) for a in alphas)
    if not any(a == 1.0 for a in alphas):
        raise QuantError("alphas must include 1.0")
    x = np.asarray(x, dtype=np.float64).ravel()
    s_opt = optimal_step_size(x, bits)
    spec = QuantSpec(bits, "symmetric", "per_tensor")
    base = quant_mse(x, spec, step_override=s_opt)
    gamma = tuple(
        0.0 if a == 1.0 else abs(quant_mse(x, spec, step_override=a * s_opt) - base)
        for a in alphas
    )
    return SensitivityReport(alphas, gamma, s_opt, condition, layer, block)
