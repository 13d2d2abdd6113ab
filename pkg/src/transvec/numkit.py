"""Dense numeric kernel shared by every other module.

Matrices are plain float64 numpy arrays. This module adds the pieces numpy
does not ship: trainable parameters with a freeze flag, counter-based seeded
generators, log-domain reductions with explicit contracts, Adam, and a
central-difference gradient checker.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "sigmoid", "relu")


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(RuntimeError):
    """Raised when a function under gradient check returns a non-finite value."""


class Param:
    """A trainable tensor with its gradient accumulator.

    A frozen parameter silently drops every gradient contribution, so its
    ``grad`` stays all-zero after any backward pass.
    """

    def __init__(self, value: np.ndarray, name: str = "", frozen: bool = False):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.frozen = frozen

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def add_grad(self, g: np.ndarray) -> None:
        if self.frozen:
            return
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {self.value.shape} ({self.name})")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else ""
        return f"Param({self.name!r}, shape={self.shape}{flag})"


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``.

    Philox is keyed through a SeedSequence over both integers, so each stream
    is reproducible on its own and independent of draw order elsewhere.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream) & 0xFFFFFFFFFFFFFFFF])
    return np.random.Generator(np.random.Philox(ss))


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activate_grad(kind: str, y: np.ndarray, x: np.ndarray | None = None) -> np.ndarray:
    """Derivative of the activation expressed through its output ``y``."""
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "relu":
        return (y > 0).astype(np.float64)
    raise ValueError(f"unknown activation {kind!r}")


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(x, axis=axis))


def logsumexp(x: Sequence[float] | np.ndarray, axis: int | None = None) -> float | np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("logsumexp of an empty input")
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def global_norm_clip(params: Iterable[Param], max_norm: float) -> float:
    params = [p for p in params if not p.frozen]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


class Adam:
    """Adam over a fixed list of parameters; frozen ones are never touched."""

    def __init__(self, params: Iterable[Param], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauDecay:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 2, min_lr: float = 1e-8):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.stale = 0

    def step(self, metric: float) -> None:
        if metric < self.best - 1e-12:
            self.best = metric
            self.stale = 0
            return
        self.stale += 1
        if self.stale >= self.patience:
            self.opt.lr = max(self.min_lr, self.opt.lr * self.factor)
            self.stale = 0


def grad_check(f: Callable[[], float], params: Sequence[Param], eps: float = 1e-6) -> float:
    """Compare analytic gradients with central differences.

    ``f`` must run forward and backward: it returns the scalar loss and
    accumulates into ``p.grad``. Frozen parameters are skipped (their analytic
    gradient is zero by construction). Returns the max relative error
    ``|ga - gn| / max(1e-8, |ga| + |gn|)`` over all checked coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    base = f()
    if not np.isfinite(base):
        raise EvaluationError(f"loss is not finite: {base}")
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        if p.frozen:
            continue
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise EvaluationError(f"loss not finite while perturbing {p.name}[{i}]")
            gn = (up - down) / (2 * eps)
            err = abs(gflat[i] - gn) / max(1e-8, abs(gflat[i]) + abs(gn))
            worst = max(worst, err)
    for p, ga in zip(params, analytic):
        p.grad[...] = ga
    return worst
