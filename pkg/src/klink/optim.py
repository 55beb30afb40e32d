"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import ShapeError, Tensor


@dataclasses.dataclass
class AdamState:
    """Step counter plus per-parameter moment estimates."""

    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, params: dict[str, Tensor], learning_rate: float = 1e-3) -> "AdamState":
        return cls(
            step=0,
            first_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            second_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            learning_rate=learning_rate,
        )


def adam_step(
    state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place; returns (params, state)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state
