"""Differentiable layers with hand-written backward passes.

Every layer accepts an optional leading *bank* axis: a weight of shape
``(P, out, in)`` applied to activations of shape ``(P, batch, in)`` is P
independent layers evaluated in one batched matmul. This is how the
per-pair relational modules run without sharing weights. Batch statistics
are always taken over axis ``-2``.

Forward passes push their caches onto a :class:`Tape`; backward passes pop
them in exact reverse order and accumulate parameter gradients into a
``dict`` keyed by parameter name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class Tape:
    """Ordered record of layer applications and their cached intermediates."""

    def __init__(self):
        self._entries: list[tuple[object, object]] = []

    def push(self, owner, cache) -> None:
        self._entries.append((owner, cache))

    def pop(self, owner):
        if not self._entries:
            raise RuntimeError("tape exhausted: backward does not match forward")
        who, cache = self._entries.pop()
        if who is not owner:
            raise RuntimeError(
                f"tape mismatch: expected {getattr(owner, 'name', owner)!r}, "
                f"found {getattr(who, 'name', who)!r}"
            )
        return cache

    def __len__(self) -> int:
        return len(self._entries)


def _accumulate(grads: dict | None, name: str, value: np.ndarray) -> None:
    if grads is None:
        return
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value  # callers always pass freshly allocated arrays


# --------------------------------------------------------------------------
# functional cores


def linear_forward(weight, bias, x):
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != {weight.shape[-1]}")
    y = np.matmul(x, np.swapaxes(weight, -1, -2)) + bias[..., None, :]
    return y, x


def linear_backward(weight, cache, dy):
    x = cache
    dx = np.matmul(dy, weight)
    dw = np.matmul(np.swapaxes(dy, -1, -2), x)
    db = dy.sum(axis=-2)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(cache, dy):
    # subgradient at exactly 0 is 0
    return dy * cache


def dropout_forward(x, p: float, mode: str, rng: Rng | None):
    _check_mode(mode)
    if mode == EVAL or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = rng.random(x.shape) >= p
    return x * mask * (1.0 / (1.0 - p)), mask


def dropout_backward(mask, p: float, dy):
    if mask is None:
        return dy
    return dy * mask * (1.0 / (1.0 - p))


# --------------------------------------------------------------------------
# layers


class Linear:
    """Fully connected layer, ``y = x W^T + b``."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng: Rng | None = None,
                 bank: tuple[int, ...] = ()):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.bank = tuple(bank)
        shape = self.bank + (out_dim, in_dim)
        if rng is None:
            self.weight = np.zeros(shape)
        else:
            # Kaiming-uniform, fan-in
            bound = math.sqrt(6.0 / in_dim)
            self.weight = rng.uniform(-bound, bound, shape)
        self.bias = np.zeros(self.bank + (out_dim,))

    def parameters(self):
        yield f"{self.name}.weight", self.weight
        yield f"{self.name}.bias", self.bias

    def forward(self, x, tape: Tape | None = None):
        y, cache = linear_forward(self.weight, self.bias, x)
        if tape is not None:
            tape.push(self, cache)
        return y

    def backward(self, tape: Tape, dy, grads: dict | None):
        cache = tape.pop(self)
        dx, dw, db = linear_backward(self.weight, cache, dy)
        _accumulate(grads, f"{self.name}.weight", dw)
        _accumulate(grads, f"{self.name}.bias", db)
        return dx


class BatchNorm:
    """Batch normalisation over axis -2 with running statistics.

    ``frozen`` keeps the running statistics fixed and makes train-mode
    normalisation use them, which is what finetuning needs.
    """

    def __init__(self, name: str, dim: int, momentum: float = 0.1, eps: float = 1e-5,
                 bank: tuple[int, ...] = ()):
        if eps <= 0 or not 0 < momentum <= 1:
            raise ValueError("batchnorm needs eps > 0 and 0 < momentum <= 1")
        self.name = name
        self.dim = dim
        self.bank = tuple(bank)
        self.momentum = momentum
        self.eps = eps
        self.frozen = False
        self.gamma = np.ones(self.bank + (dim,))
        self.beta = np.zeros(self.bank + (dim,))
        self.running_mean = np.zeros(self.bank + (dim,))
        self.running_var = np.ones(self.bank + (dim,))

    def parameters(self):
        yield f"{self.name}.gamma", self.gamma
        yield f"{self.name}.beta", self.beta

    def buffers(self):
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var

    def forward(self, x, mode: str, tape: Tape | None = None):
        _check_mode(mode)
        if mode == TRAIN and not self.frozen:
            n = x.shape[-2]
            if n < 2:
                raise ValueError("batchnorm in train mode needs a batch of at least 2")
            mean = x.mean(axis=-2)
            var = x.var(axis=-2)
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mean
            self.running_var *= 1.0 - m
            self.running_var += m * var * (n / (n - 1))
            batch_stats = True
        else:
            mean, var = self.running_mean, self.running_var
            batch_stats = False
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[..., None, :]) * inv_std[..., None, :]
        y = self.gamma[..., None, :] * xhat + self.beta[..., None, :]
        if tape is not None:
            tape.push(self, (xhat, inv_std, batch_stats))
        return y

    def backward(self, tape: Tape, dy, grads: dict | None):
        xhat, inv_std, batch_stats = tape.pop(self)
        _accumulate(grads, f"{self.name}.gamma", (dy * xhat).sum(axis=-2))
        _accumulate(grads, f"{self.name}.beta", dy.sum(axis=-2))
        dxhat = dy * self.gamma[..., None, :]
        if not batch_stats:
            return dxhat * inv_std[..., None, :]
        n = dy.shape[-2]
        s1 = dxhat.sum(axis=-2, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-2, keepdims=True)
        return (inv_std[..., None, :] / n) * (n * dxhat - s1 - xhat * s2)


class Dropout:
    """Inverted dropout; identity in eval mode."""

    def __init__(self, name: str, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")
        self.name = name
        self.p = p

    def forward(self, x, mode: str, rng: Rng | None, tape: Tape | None = None):
        y, mask = dropout_forward(x, self.p, mode, rng)
        if tape is not None:
            tape.push(self, (mask, self.p))
        return y

    def backward(self, tape: Tape, dy):
        mask, p = tape.pop(self)
        return dropout_backward(mask, p, dy)


class ReLU:
    def __init__(self, name: str = "relu"):
        self.name = name

    def forward(self, x, tape: Tape | None = None):
        y, cache = relu_forward(x)
        if tape is not None:
            tape.push(self, cache)
        return y

    def backward(self, tape: Tape, dy):
        return relu_backward(tape.pop(self), dy)


@dataclass
class BlockConfig:
    dim: int
    dropout: float
    momentum: float = 0.1
    eps: float = 1e-5
    bank: tuple[int, ...] = field(default_factory=tuple)


class ResBlock:
    """Residual block: optional entry FC, then ``h + S2(S1(h))`` where each
    sub-stack is BatchNorm -> Dropout -> ReLU -> FC(dim, dim)."""

    def __init__(self, name: str, cfg: BlockConfig, rng: Rng | None,
                 in_dim: int | None = None):
        self.name = name
        self.cfg = cfg
        bank = cfg.bank
        self.entry = (Linear(f"{name}.entry", in_dim, cfg.dim, rng, bank)
                      if in_dim is not None else None)
        self.stacks = []
        for k in (1, 2):
            self.stacks.append((
                BatchNorm(f"{name}.bn{k}", cfg.dim, cfg.momentum, cfg.eps, bank),
                Dropout(f"{name}.drop{k}", cfg.dropout),
                ReLU(f"{name}.relu{k}"),
                Linear(f"{name}.fc{k}", cfg.dim, cfg.dim, rng, bank),
            ))

    def layers(self):
        if self.entry is not None:
            yield self.entry
        for stack in self.stacks:
            yield from stack

    def parameters(self):
        for layer in self.layers():
            if hasattr(layer, "parameters"):
                yield from layer.parameters()

    def buffers(self):
        for layer in self.layers():
            if isinstance(layer, BatchNorm):
                yield from layer.buffers()

    def forward(self, x, mode: str, rng: Rng | None, tape: Tape | None = None):
        h = self.entry.forward(x, tape) if self.entry is not None else x
        if h.shape[-1] != self.cfg.dim:
            raise ValueError(f"{self.name}: expected dim {self.cfg.dim}, got {h.shape[-1]}")
        a = h
        for bn, drop, relu, fc in self.stacks:
            a = bn.forward(a, mode, tape)
            a = drop.forward(a, mode, rng, tape)
            a = relu.forward(a, tape)
            a = fc.forward(a, tape)
        return h + a

    def backward(self, tape: Tape, dy, grads: dict | None):
        da = dy
        for bn, drop, relu, fc in reversed(self.stacks):
            da = fc.backward(tape, da, grads)
            da = relu.backward(tape, da)
            da = drop.backward(tape, da)
            da = bn.backward(tape, da, grads)
        dh = dy + da  # skip fan-out
        if self.entry is not None:
            return self.entry.backward(tape, dh, grads)
        return dh


def set_frozen(blocks, frozen: bool) -> None:
    for block in blocks:
        for layer in block.layers():
            if isinstance(layer, BatchNorm):
                layer.frozen = frozen


def set_dropout(blocks, p: float) -> None:
    for block in blocks:
        for layer in block.layers():
            if isinstance(layer, Dropout):
                layer.p = p
