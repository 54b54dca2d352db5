"""AMSgrad with the first moment bias-corrected and the second moment left raw."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient, ShapeMismatch


@dataclass
class OptimizerState:
    """Moment accumulators for one parameter tensor.

    A loading table of shape (S, k) gets a single state: every update is
    elementwise, so this is the same as S independent per-subject states
    stepped together.
    """

    m: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    eta: float = 0.1

    @classmethod
    def zeros_like(cls, param, **hyper) -> "OptimizerState":
        z = np.zeros_like(np.asarray(param, dtype=float))
        return cls(m=z.copy(), v=z.copy(), v_hat=z.copy(), **hyper)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.m.copy(), self.v.copy(), self.v_hat.copy(), self.step_count,
            self.beta1, self.beta2, self.epsilon, self.eta,
        )


def amsgrad_step(state: OptimizerState, gradient, parameter) -> np.ndarray:
    """Apply one update; mutates ``state`` and returns the new parameter.

        m     = b1 m + (1 - b1) g
        v     = b2 v + (1 - b2) g^2
        m_hat = m / (1 - b1^i)
        v_hat = max(v_hat, v)
        w     = w - eta m_hat / (sqrt(v_hat) + eps)
    """
    g = np.asarray(gradient, dtype=float)
    w = np.asarray(parameter, dtype=float)
    if g.shape != w.shape or g.shape != state.m.shape:
        raise ShapeMismatch(f"gradient {g.shape}, parameter {w.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient contains non-finite entries")
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
    state.v_hat = np.maximum(state.v_hat, state.v)
    return w - state.eta * m_hat / (np.sqrt(state.v_hat) + state.epsilon)
