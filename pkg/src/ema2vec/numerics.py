"""Small numerical toolkit: two-parameter least squares, Adam, finite differences.

Dense matrices are plain ``numpy.ndarray`` objects in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import ContractViolationError, DegenerateFitError, DegenerateInputError, NumericFaultError

__all__ = [
    "AdamState",
    "adam_step",
    "cosine_similarity",
    "finite_diff_gradient",
    "solve_least_squares",
]


def solve_least_squares(basis: np.ndarray, targets: np.ndarray) -> tuple[float, float, float]:
    """Fit ``targets ≈ alpha * basis[:, 0] + beta`` in closed form.

    ``basis`` must have two columns, the second one all ones.  Returns
    ``(alpha, beta, residual_ss)``.
    """
    basis = np.asarray(basis, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if basis.ndim != 2 or basis.shape[1] != 2:
        raise ContractViolationError(f"basis must be n x 2, got shape {basis.shape}")
    n = basis.shape[0]
    if n < 2 or y.shape != (n,):
        raise ContractViolationError(f"need n >= 2 targets matching basis rows (n={n}, targets={y.shape})")
    if not np.all(basis[:, 1] == 1.0):
        raise ContractViolationError("second basis column must be all ones")
    x = basis[:, 0]
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NumericFaultError("non-finite value in least-squares input")

    # Centered normal equations: identical solution, better conditioned.
    x_mean = x.mean()
    y_mean = y.mean()
    xc = x - x_mean
    sxx = float(xc @ xc)
    scale = max(1.0, float(x @ x))
    if sxx <= 1e-14 * scale:
        raise DegenerateFitError(f"rank-deficient basis: regressor column is constant ({x.tolist()})")
    alpha = float(xc @ (y - y_mean)) / sxx
    beta = float(y_mean - alpha * x_mean)
    resid = y - (alpha * x + beta)
    return alpha, beta, float(resid @ resid)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update with coupled (L2) weight decay.

    Inputs are not modified; new arrays and a new state are returned.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ContractViolationError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.first_moment.shape}"
        )
    if lr < 0 or weight_decay < 0:
        raise ContractViolationError("lr and weight_decay must be non-negative")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NumericFaultError(f"non-finite gradient at parameter index {int(bad[0])}", index=int(bad[0]))

    g = grads + weight_decay * params if weight_decay else grads
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ContractViolationError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFaultError(f"non-finite function value around coordinate {i}", index=i)
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractViolationError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))
