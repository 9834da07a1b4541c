"""Adam with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers and step counter for one parameter tensor."""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, param: Tensor, learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        # moments kept in float64 whatever the parameter precision
        zeros = np.zeros(param.shape, dtype=np.float64)
        return cls(zeros, zeros.copy(), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState) -> None:
    """Apply one Adam update to ``param`` in place and advance ``state``."""
    g = np.asarray(grad, dtype=np.float64)
    if g.size != param.size or state.first_moment.size != param.size:
        raise DimensionError(
            f"adam: parameter has {param.size} values, gradient {g.size}, "
            f"moments {state.first_moment.size}")
    g = g.reshape(param.shape)
    state.step += 1
    t = state.step
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1 - state.beta1) * g
    v *= state.beta2
    v += (1 - state.beta2) * (g * g)
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.data = (param.data.astype(np.float64) - update).astype(param.data.dtype)


@dataclass
class Adam:
    """Convenience wrapper holding one :class:`AdamState` per named parameter."""
    params: dict[str, Tensor]
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states[name] = AdamState.fresh(p, self.learning_rate, self.beta1,
                                                self.beta2, self.epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p, g, self.states[name])
