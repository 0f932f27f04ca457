"""Dense matrix helpers, orthogonal-matrix construction, and Hadamard transforms.

Matrices are plain 2-D float64 numpy arrays in row-major order. Activations
are stored one token per row, so a rotation R acts on the channel dimension
as ``x @ R``. Everything here is pure and safe to call from parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6
EXACT_TOL = 1e-10
DET_TOL = 1e-4


class DimensionError(ValueError):
    """Shape or size precondition violated."""


class RankError(ValueError):
    """Input matrix numerically rank deficient."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit dimension check.

    Delegates to numpy's BLAS matmul, which is deterministic for a fixed
    install; tests compare it against a naive triple-loop oracle.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def orthogonality_defect(q: np.ndarray) -> float:
    """Max-abs entry of Q^T Q - I."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[0]))))


@dataclass(frozen=True)
class OrthogonalMatrix:
    """A square matrix certified orthonormal at construction time.

    Raises if ``max|Q^T Q - I|`` exceeds `tolerance` or if |det| strays from 1
    by more than 1e-4.
    """

    q: np.ndarray
    tolerance: float = ORTHO_TOL
    defect: float = field(init=False)

    def __post_init__(self):
        q = as_matrix(self.q, "q")
        if q.shape[0] != q.shape[1]:
            raise DimensionError(f"orthogonal matrix must be square, got {q.shape}")
        q = np.array(q, dtype=np.float64, order="C")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        defect = orthogonality_defect(q)
        object.__setattr__(self, "defect", defect)
        if defect > self.tolerance:
            raise ValueError(
                f"orthogonality defect {defect:.3e} exceeds tolerance {self.tolerance:.1e}"
            )
        sign, logdet = np.linalg.slogdet(q)
        if sign == 0 or abs(math.exp(logdet) - 1.0) > DET_TOL:
            raise ValueError("determinant magnitude not within 1e-4 of 1")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def transpose(self) -> "OrthogonalMatrix":
        return OrthogonalMatrix(self.q.T.copy(), self.tolerance)


def qr_orthogonalize(a: np.ndarray, tolerance: float = EXACT_TOL) -> OrthogonalMatrix:
    """Unique Q factor of a square full-rank matrix.

    Householder QR with the sign of each column fixed so that R's diagonal is
    positive, which makes the factorization unique. An already-orthogonal
    input is reproduced (up to roundoff) instead of being re-mixed.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"input must be square, got {a.shape}")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankError(f"rank-deficient input: sigma_min/sigma_max = {sv[-1] / sv[0]:.3e}")
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return OrthogonalMatrix(q * signs, tolerance)


def random_orthogonal(n: int, seed: int) -> OrthogonalMatrix:
    """Haar-ish random rotation: sign-fixed QR of a seeded Gaussian matrix.

    Same (n, seed) gives a bit-identical matrix.
    """
    if n < 1:
        raise DimensionError("n must be >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, n))
    return qr_orthogonalize(g, tolerance=EXACT_TOL)


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hadamard_dense(n: int) -> np.ndarray:
    """Raw Sylvester Hadamard matrix scaled by 1/sqrt(n); entries +-1/sqrt(n)."""
    if not _is_power_of_two(n):
        raise DimensionError(f"Hadamard size must be a power of two, got {n}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(n)


def hadamard_matrix(n: int) -> OrthogonalMatrix:
    """Normalized Sylvester Hadamard matrix as a certified rotation."""
    return OrthogonalMatrix(hadamard_dense(n), tolerance=EXACT_TOL)


def fast_hadamard_transform(x: np.ndarray, inverse_scale: bool = False) -> np.ndarray:
    """Butterfly Walsh-Hadamard transform of the last axis, O(n log n).

    The default scaling is orthonormal (1/sqrt(n)), identical to multiplying
    by `hadamard_matrix(n)`; applying it twice returns the input. With
    `inverse_scale` the result is divided by n instead, which inverts the raw
    (unscaled) butterfly.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if not _is_power_of_two(n):
        raise DimensionError(f"transform length must be a power of two, got {n}")
    y = x.copy()
    h = 1
    while h < n:
        y = y.reshape(*x.shape[:-1], n // (2 * h), 2, h)
        a = y[..., 0, :].copy()
        b = y[..., 1, :]
        y[..., 0, :] = a + b
        y[..., 1, :] = a - b
        y = y.reshape(*x.shape)
        h *= 2
    return y / (n if inverse_scale else math.sqrt(n))


def random_signs(n: int, seed: int) -> np.ndarray:
    """Seeded +-1 diagonal used to randomize Hadamard rotations."""
    rng = np.random.default_rng(seed)
    return np.where(rng.random(n) < 0.5, -1.0, 1.0)


def randomized_hadamard(n: int, seed: int) -> OrthogonalMatrix:
    """D @ H for a seeded random sign diagonal D and normalized Hadamard H.

    The default online rotation and the random-rotation comparison baseline.
    """
    if not _is_power_of_two(n):
        raise DimensionError(f"Hadamard size must be a power of two, got {n}")
    d = random_signs(n, seed)
    return OrthogonalMatrix(d[:, None] * hadamard_dense(n), tolerance=EXACT_TOL)


def apply_randomized_hadamard(x: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Rows of x multiplied by D@H on the right: x @ (D H) = fht(x * signs).

    Fast path for online rotations; equals ``x @ randomized_hadamard(n, s).q``.
    """
    return fast_hadamard_transform(np.asarray(x, dtype=np.float64) * signs)
