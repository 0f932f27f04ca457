"""Optimizers constrained to the orthogonal group via the Cayley transform.

The parameter is an n x n rotation. Each step projects the Euclidean
gradient onto the tangent space (a skew-symmetric matrix), feeds it through
a momentum/Adam rule, and retracts back onto the manifold with
(I - tA/2)^-1 (I + tA/2) W. Drift beyond 1e-8 triggers QR re-orthogonalization
so long runs keep the orthogonality certificate meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import OrthogonalMatrix, as_matrix, orthogonality_defect, qr_orthogonalize

REORTH_DRIFT = 1e-8
DIRECT_SOLVE_MAX_N = 512


class StepError(RuntimeError):
    """Retraction failed; the effective step is too large."""


def skew_project(grad: np.ndarray, w: OrthogonalMatrix | np.ndarray) -> np.ndarray:
    """Tangent-space projection A = G W^T - W G^T (exactly skew-symmetric)."""
    g = as_matrix(grad, "grad")
    wq = w.q if isinstance(w, OrthogonalMatrix) else as_matrix(w, "w")
    if g.shape != wq.shape:
        raise ValueError(f"shape mismatch: grad {g.shape} vs w {wq.shape}")
    gwt = g @ wq.T
    return gwt - gwt.T


def cayley_retract(
    w: OrthogonalMatrix,
    a: np.ndarray,
    step: float,
    iterations: int = 3,
) -> OrthogonalMatrix:
    """W+ = (I - (step/2) A)^-1 (I + (step/2) A) W for skew A.

    Small problems use a direct solve; above DIRECT_SOLVE_MAX_N a fixed-point
    iteration Y <- W + (step/2) A (W + Y) approximates it in `iterations`
    rounds. The result is re-certified and QR-corrected if drift exceeds 1e-8.
    """
    a = as_matrix(a, "a")
    n = w.n
    if a.shape != (n, n):
        raise ValueError(f"skew matrix shape {a.shape} does not match parameter {w.q.shape}")
    if np.max(np.abs(a + a.T)) > 1e-12 * max(1.0, float(np.max(np.abs(a)))):
        raise ValueError("a is not skew-symmetric")
    if step == 0.0 or not np.any(a):
        return w
    t = 0.5 * step
    if n <= DIRECT_SOLVE_MAX_N:
        lhs = np.eye(n) - t * a
        rhs = (np.eye(n) + t * a) @ w.q
        try:
            y = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError as e:
            raise StepError(f"Cayley solve singular at step {step:g}; reduce the step") from e
    else:
        y = w.q.copy()
        ta_w = t * (a @ w.q)
        for _ in range(iterations):
            y = w.q + ta_w + t * (a @ y)
    if orthogonality_defect(y) > REORTH_DRIFT:
        return qr_orthogonalize(y, tolerance=w.tolerance)
    return OrthogonalMatrix(y, w.tolerance)


@dataclass
class CayleyState:
    """Mutable optimizer state; one instance per parameter.

    second_moment is a scalar (RMS of the skew update, the cheap default) or
    a full elementwise matrix when elementwise=True.
    """

    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    cayley_iterations: int = 3
    elementwise: bool = False
    momentum: np.ndarray | None = None
    second_moment: np.ndarray | float = 0.0
    step_count: int = 0

    def _init_buffers(self, n: int) -> None:
        if self.momentum is None:
            self.momentum = np.zeros((n, n))
            if self.elementwise:
                self.second_moment = np.zeros((n, n))


def cayley_adam_step(
    w: OrthogonalMatrix,
    grad: np.ndarray,
    state: CayleyState,
    lr: float | None = None,
) -> OrthogonalMatrix:
    """One Adam step on the orthogonal group; updates state in place.

    Moments run on the skew-projected gradient with the usual bias
    correction; the retraction step is lr / (sqrt(v_hat) + eps). Passing lr
    overrides the state's rate for schedules.
    """
    g = as_matrix(grad, "grad")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    state._init_buffers(w.n)
    a = skew_project(g, w)
    state.step_count += 1
    t = state.step_count
    state.momentum = state.beta1 * state.momentum + (1.0 - state.beta1) * a
    if state.elementwise:
        state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * a * a
    else:
        state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * float(
            np.mean(a * a)
        )
    m_hat = state.momentum / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    rate = state.lr if lr is None else lr
    if state.elementwise:
        # v_hat is symmetric (entries of a skew matrix squared), so the
        # preconditioned direction stays skew and can be retracted directly.
        direction = m_hat / (np.sqrt(v_hat) + state.eps)
        return cayley_retract(w, direction, -rate, state.cayley_iterations)
    denom = float(np.sqrt(v_hat)) + state.eps
    # negative step: the Cayley flow along A ascends the objective
    return cayley_retract(w, m_hat, -rate / denom, state.cayley_iterations)


def cayley_sgd_step(
    w: OrthogonalMatrix,
    grad: np.ndarray,
    state: CayleyState,
    lr: float | None = None,
    momentum: float = 0.9,
) -> OrthogonalMatrix:
    """Momentum-SGD variant: m <- mu m + A, retract by lr * m.

    With momentum=0 this is the plain projected-gradient Cayley step.
    """
    g = as_matrix(grad, "grad")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    state._init_buffers(w.n)
    a = skew_project(g, w)
    state.step_count += 1
    state.momentum = momentum * state.momentum + a
    rate = state.lr if lr is None else lr
    return cayley_retract(w, state.momentum, -rate, state.cayley_iterations)


def cosine_lr(base_lr: float, iteration: int, total: int) -> float:
    """Cosine decay from base_lr to 0 over `total` iterations."""
    if total <= 1:
        return base_lr
    frac = min(max(iteration, 0), total - 1) / (total - 1)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
