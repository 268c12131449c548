"""MSE loss, Adam, step-halving schedule, training and finetuning loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numba
import numpy as np

from .layers import TRAIN, Tape
from .model import ModelSpec, PoseModel, sample_drop
from .numerics import Rng
from .skeleton import Dataset, NormStats, preprocess

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    batch_size: int = 128
    total_iters: int = 100_000
    halve_every: int = 20_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    finetune: bool = False
    finetune_dropout: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0 or self.batch_size < 1 or self.total_iters < 0:
            raise ValueError("base_lr and batch_size must be positive, total_iters >= 0")
        if self.halve_every < 1 or self.log_every < 1:
            raise ValueError("halve_every and log_every must be positive")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def lr_at(config: TrainConfig, iteration: int) -> float:
    if not 0 <= iteration < max(config.total_iters, 1):
        raise ValueError(f"iteration {iteration} outside [0, {config.total_iters})")
    return config.base_lr * 0.5 ** (iteration // config.halve_every)


@numba.njit(cache=True)
def _adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Adam:
    """Bias-corrected Adam over named arrays, updated in place."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads: dict, lr: float) -> None:
        params = list(params)
        for name, _ in params:
            g = grads.get(name)
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params:
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            flat = p.reshape(-1)
            if not np.shares_memory(flat, p):
                raise ValueError(f"parameter {name} is not contiguous")
            _adam_update(flat, np.ascontiguousarray(g).reshape(-1), self.m[name].reshape(-1),
                         self.v[name].reshape(-1), lr, self.beta1, self.beta2, c1, c2, self.eps)


class BatchSampler:
    """Seeded shuffled mini-batches; reshuffles whenever a pass runs out."""

    def __init__(self, n: int, batch_size: int, rng: Rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class TrainResult:
    model: PoseModel
    curve: list[tuple[int, float, float]]  # (iteration, lr, loss)
    stats: NormStats


def _loop(model: PoseModel, inputs, targets, config: TrainConfig, label: str):
    if len(inputs) < 2:
        raise ValueError("training needs at least 2 samples (batch statistics)")
    root = Rng(config.seed).split(label)
    sampler = BatchSampler(len(inputs), config.batch_size, root.split("batches"))
    opt = Adam(config.beta1, config.beta2, config.adam_eps)
    curve = []
    for it in range(config.total_iters):
        idx = sampler.next()
        x, y = inputs[idx], targets[idx]
        it_rng = root.split(it)
        masks = sample_drop(it_rng.split("reldrop"), model.spec, len(idx))
        tape = Tape()
        pred = model.forward(x, masks, TRAIN, it_rng.split("dropout"), tape)
        loss, dpred = mse_loss(pred, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(it, loss)
        grads = model.backward(tape, dpred)
        lr = lr_at(config, it)
        opt.step(model.parameters(), grads, lr)
        if it % config.log_every == 0:
            curve.append((it, lr, loss))
            log.debug("iter %d lr %.3g loss %.4g", it, lr, loss)
    return curve


def train(spec: ModelSpec, dataset: Dataset, config: TrainConfig,
          model: PoseModel | None = None) -> TrainResult:
    """Train a model from scratch (or continue ``model``) on ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    inputs, targets, stats = preprocess(dataset)
    if model is None:
        model = PoseModel(spec, stats)
    else:
        model.stats = stats
    curve = _loop(model, inputs, targets, config, "train")
    return TrainResult(model, curve, stats)


def finetune(model: PoseModel, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Continue training a copy of ``model`` with frozen batch-norm statistics
    and every dropout rate set to ``config.finetune_dropout``.

    Normalisation statistics of the original training split are kept.
    """
    if model.stats is None:
        raise ValueError("finetuning needs a model with stored normalisation statistics")
    if not config.finetune:
        raise ValueError("finetune requires config.finetune = True")
    tuned = model.copy()
    inputs, targets, _ = preprocess(dataset, model.stats)
    tuned.set_bn_frozen(True)
    tuned.set_all_dropout(config.finetune_dropout)
    try:
        curve = _loop(tuned, inputs, targets, config, "finetune")
    finally:
        tuned.set_bn_frozen(False)
        tuned.set_all_dropout(None)
    return TrainResult(tuned, curve, tuned.stats)


def write_loss_curve(curve, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "lr", "loss"])
        for it, lr, loss in curve:
            w.writerow([it, repr(lr), repr(loss)])
