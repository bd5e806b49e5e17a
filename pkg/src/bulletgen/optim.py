"""ADAM optimizer with Euclidean and rotation-tangent parameter groups.

Quaternion-valued parameters are stepped on the axis-angle tangent at the
current value and re-composed by left multiplication, which sidesteps
normalization drift; everything else is a plain bias-corrected update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient
from .geometry import quat_from_axis_angle, quat_multiply


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(shape) -> "AdamState":
        return AdamState(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected ADAM update; mutates state, returns new params."""
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("gradient contains nan or inf")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def quat_tangent_grad(q: np.ndarray, g_q: np.ndarray) -> np.ndarray:
    """Pull a raw-quaternion gradient back to the axis-angle tangent.

    The perturbation model is q(w) = exp(w) * q, so the i-th tangent
    component is <g_q, d/dw_i> = <g_q, 0.5 e_i * q>.
    """
    out = np.zeros(q.shape[:-1] + (3,))
    for i in range(3):
        e = np.zeros(q.shape)
        e[..., 1 + i] = 1.0
        out[..., i] = 0.5 * np.sum(g_q * quat_multiply(e, q), axis=-1)
    return out


def apply_quat_tangent(q: np.ndarray, omega: np.ndarray) -> np.ndarray:
    return quat_multiply(quat_from_axis_angle(omega), q)


@dataclass
class AdamOptimizer:
    """Keyed collection of ADAM states, one per parameter array.

    kind="euclidean" steps the array directly; kind="quat_tangent" expects
    a (..., 4) quaternion array with a matching raw gradient and steps on
    the (..., 3) tangent instead.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _states: dict = field(default_factory=dict)

    def step(self, key: str, value: np.ndarray, grad: np.ndarray,
             lr: float, kind: str = "euclidean") -> np.ndarray:
        if kind == "euclidean":
            state = self._states.setdefault(key, AdamState.zeros(value.shape))
            return adam_step(value, grad, state, lr,
                             self.beta1, self.beta2, self.eps)
        if kind == "quat_tangent":
            tangent = quat_tangent_grad(value, grad)
            state = self._states.setdefault(key, AdamState.zeros(tangent.shape))
            zero = np.zeros_like(tangent)
            delta = adam_step(zero, tangent, state, lr,
                              self.beta1, self.beta2, self.eps)
            return apply_quat_tangent(value, delta)
        raise ValueError(f"unknown parameter kind: {kind}")

    def reset(self) -> None:
        self._states.clear()
