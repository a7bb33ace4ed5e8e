from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float) -> None:
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError

    def reset_state(self) -> None:
        pass


class SGD(Optimizer):
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0) -> None:
        super().__init__(params, lr)
        self.momentum = momentum
        self._buf: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum:
                buf = self._buf.get(i)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self._buf[i] = buf
                g = buf
            p.data -= (self.lr * g).astype(p.data.dtype)

    def reset_state(self) -> None:
        self._buf.clear()


class Adam(Optimizer):
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.reset_state()

    def reset_state(self) -> None:
        self._t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = b1 * self._m.get(i, 0.0) + (1 - b1) * g
            v = b2 * self._v.get(i, 0.0) + (1 - b2) * g * g
            self._m[i], self._v[i] = m, v
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "sgd_momentum":
        return SGD(params, lr, momentum=0.9)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
