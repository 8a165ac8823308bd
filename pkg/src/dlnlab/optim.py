"""Adam with bias correction, plus gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dlnlab.autograd import Tensor, get_tape
from dlnlab.exceptions import ShapeMismatch


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Return updated copies of ``params``; moments in ``state`` advance one step."""
    if len(params) != len(grads):
        raise ShapeMismatch("adam_step", (len(params),), (len(grads),))
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeMismatch("adam_step", p.shape, g.shape)
        m = state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        out.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


class Adam:
    """Stateful wrapper over :func:`adam_step` for a fixed list of parameters.

    ``step`` also frees the active tape, so each update starts a fresh graph.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params: list[Tensor] = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.clip_norm = clip_norm

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip_norm is not None:
            grads = clip_grad_norm(grads, self.clip_norm)
        new = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d
        get_tape().clear()


def clip_grad_norm(grads, max_norm):
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return [g * scale for g in grads]
