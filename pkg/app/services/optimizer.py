"""
Optimizer service for the entity classification package.
Adam with bias correction; the optimizer is the only mutator of parameters.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from app.utils.errors import InvalidShapeError, NonFiniteGradientError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments per parameter name plus the step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, on_nonfinite='fail'):
    """
    Apply one Adam update in place.

    Args:
        params (dict): Name -> Tensor (updated in place)
        grads (dict): Name -> gradient array; missing names count as zero
        state (AdamState): Moments and step counter (updated in place)
        lr (float): Learning rate
        on_nonfinite (str): 'fail' raises, 'skip' leaves params and state untouched

    Returns:
        bool: True if the step was applied

    Raises:
        NonFiniteGradientError: On a non-finite gradient with on_nonfinite='fail'
        InvalidShapeError: If a gradient shape differs from its parameter
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise InvalidShapeError(f"Gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            if on_nonfinite == 'skip':
                logger.warning(f"Skipping Adam step {state.step + 1}: non-finite gradient for {name}")
                return False
            raise NonFiniteGradientError(f"Non-finite gradient for parameter {name}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step

    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data = (param.data - update).astype(param.data.dtype)

    return True


class Adam:
    """
    Adam optimizer over a named parameter dict.

    Gradients are read from each parameter's `.grad`, so several backward
    calls before `step` act as one batch.
    """

    def __init__(self, params, lr=5e-3, beta1=0.9, beta2=0.999, eps=1e-8, on_nonfinite='fail'):
        self.params = params
        self.lr = lr
        self.on_nonfinite = on_nonfinite
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grad_scale=1.0):
        grads = {
            name: p.grad * grad_scale
            for name, p in self.params.items()
            if p.grad is not None
        }
        return adam_step(self.params, grads, self.state, self.lr, self.on_nonfinite)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
