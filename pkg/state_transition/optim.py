from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from state_transition.errors import DimensionError

DEFAULT_LEARNING_RATE = 8e-5


@dataclass
class AdamState:
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update. params are updated in place and also returned.
    A parameter with no entry in grads is treated as having a zero gradient.
    """
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f"Gradient given for unknown parameter {name}")
        if grad.shape != params[name].shape:
            raise DimensionError(
                f"adam_step: gradient shape {grad.shape} does not match parameter {name} shape {params[name].shape}")

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)

        m = state.first_moment.setdefault(name, np.zeros_like(param))
        v = state.second_moment.setdefault(name, np.zeros_like(param))
        if m.shape != param.shape:
            raise DimensionError(f"adam_step: moment shape {m.shape} does not match parameter {name} shape {param.shape}")

        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        param -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)

    return params, state
