"""Closed-form factorization gradients, Adam, and the step-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "DivergenceError",
    "AdamState",
    "StepLRSchedule",
    "approx_grads",
    "residual_grads",
    "adam_step",
    "lr_at",
]


class DivergenceError(RuntimeError):
    """Raised when an optimization run produces non-finite values."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def _check_factor_shapes(w0: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    d, k = w0.shape
    r = a.shape[0]
    if b.shape != (d, r) or a.shape != (r, k):
        raise ValueError(
            f"factor shape mismatch: w0 {w0.shape}, a {a.shape}, b {b.shape} "
            f"(need a ({r}, {k}), b ({d}, {r}))"
        )


def residual_grads(diff: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of ||diff||_F^2 w.r.t. (a, b) where diff = w0 - b @ a."""
    return -2.0 * (b.T @ diff), -2.0 * (diff @ a.T)


def approx_grads(w0: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Analytic gradients of the reconstruction objective ||w0 - b a||_F^2.

    Returns (grad_a, grad_b) = (-2 b^T (w0 - b a), -2 (w0 - b a) a^T).
    """
    w0 = np.asarray(w0, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w0.ndim != 2 or a.ndim != 2 or b.ndim != 2:
        raise ValueError("approx_grads needs 2-D w0, a, b")
    _check_factor_shapes(w0, a, b)
    diff = w0 - b @ a
    return residual_grads(diff, a, b)


@dataclass(frozen=True)
class AdamState:
    """Per-parameter Adam moments. One state per optimized tensor."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, shape, beta1: float = 0.9, beta2: float = 0.999,
             epsilon: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=np.zeros(shape, dtype=np.float64),
            second_moment=np.zeros(shape, dtype=np.float64),
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              lr: float):
    """One bias-corrected Adam update. Returns (new params, new state).

    Aborts with DivergenceError on non-finite gradients, reporting the
    step index that would have been applied.
    """
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.first_moment.shape}"
        )
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    t = state.step_count + 1
    if not np.all(np.isfinite(grads)):
        raise DivergenceError(f"non-finite gradient at step {t}", step=t)
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.first_moment + (1.0 - b1) * grads
    v = b2 * state.second_moment + (1.0 - b2) * (grads * grads)
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


@dataclass(frozen=True)
class StepLRSchedule:
    """Learning rate decayed by `gamma` every `step_size` iterations."""

    base_lr: float
    step_size: int = 5000
    gamma: float = 0.5

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.step_size < 1:
            raise ValueError(f"step_size must be >= 1, got {self.step_size}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")


def lr_at(schedule: StepLRSchedule, step: int) -> float:
    """Learning rate in effect at `step` (0-based)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return schedule.base_lr * schedule.gamma ** (step // schedule.step_size)
