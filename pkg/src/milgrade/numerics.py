"""Dense float64 arithmetic, stable softmax / cross-entropy, Adam and a
central-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from milgrade.errors import DimensionError, DomainError, NumericError


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    m = v.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def cross_entropy_from_logits(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if logits.size == 0:
        raise DomainError("cross-entropy of empty logits")
    if not 0 <= label < logits.size:
        raise DomainError(f"label {label} out of range for {logits.size} classes")
    return float(max(logsumexp(logits) - logits[label], 0.0))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated."""
    param = np.array(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    new_state = AdamState(
        np.array(state.m, dtype=np.float64), np.array(state.v, dtype=np.float64), state.t,
        state.learning_rate, state.beta1, state.beta2, state.epsilon,
    )
    adam_update_(param, grad, new_state)
    return param, new_state


def adam_update_(param: np.ndarray, grad: np.ndarray, state: AdamState) -> None:
    """In-place Adam on an owned parameter array and state (the training hot path)."""
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError(
            f"adam shapes disagree: param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    if not (param.flags.c_contiguous and state.m.flags.c_contiguous and state.v.flags.c_contiguous):
        raise DimensionError("adam_update_ needs C-contiguous parameter and moment arrays")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    _adam_kernel(
        param.reshape(-1), np.ascontiguousarray(grad, dtype=np.float64).reshape(-1),
        state.m.reshape(-1), state.v.reshape(-1),
        state.beta1, state.beta2, state.learning_rate / bc1, 1.0 / np.sqrt(bc2), state.epsilon,
    )


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, b1, b2, step, inv_sqrt_bc2, eps):
    # p -= lr * m_hat / (sqrt(v_hat) + eps), fused into one pass
    for i in range(p.size):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= step * m[i] / (np.sqrt(v[i]) * inv_sqrt_bc2 + eps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise DomainError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
