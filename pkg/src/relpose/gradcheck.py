"""Analytic-vs-finite-difference gradient checks for whole models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import TRAIN, Tape
from .model import DropMask, ModelSpec, PoseModel, preset
from .numerics import Rng, finite_diff_grad
from .training import mse_loss

# Below this magnitude errors are measured absolutely; central differences
# carry ~1e-16 * loss / eps of round-off.
REL_FLOOR = 1e-6
TOLERANCE = 1e-4
FD_EPS = 1e-5

TINY_DIMS = dict(f_dim=12, g_dim=8, intra_dim=6)


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    size: int


@dataclass
class GradcheckReport:
    tag: str
    checks: list[ParamCheck]

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error < tol

    def worst(self, n: int = 5) -> list[ParamCheck]:
        return sorted(self.checks, key=lambda c: -c.max_rel_error)[:n]


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def randomize_statistics(model: PoseModel, rng: Rng) -> None:
    """Non-trivial batch-norm affine parameters and running statistics."""
    for name, arr in model.parameters():
        if name.endswith(".gamma"):
            arr[...] = rng.uniform(0.5, 1.5, arr.shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            arr[...] = rng.uniform(-0.5, 0.5, arr.shape)
    for name, arr in model.buffers():
        if name.endswith("running_mean"):
            arr[...] = rng.uniform(-0.5, 0.5, arr.shape)
        else:
            arr[...] = rng.uniform(0.5, 2.0, arr.shape)


def fixed_masks(spec: ModelSpec, batch: int):
    if not spec.relational:
        return None
    masks = [DropMask() for _ in range(batch)]
    masks[0] = DropMask(groups=(1,))
    if spec.variant == "RN-hier" and batch > 1:
        masks[1] = DropMask(joints=(5,))
    return masks


def check_model(model: PoseModel, x, target, masks, seed: int = 0,
                eps: float = FD_EPS) -> GradcheckReport:
    """Compare backward against central differences for every parameter.

    The forward runs in train mode with frozen batch-norm statistics and a
    freshly seeded rng per evaluation, so dropout masks are identical across
    all perturbed evaluations.
    """
    model.set_bn_frozen(True)

    def loss_of() -> float:
        out = model.forward(x, masks, TRAIN, Rng(seed))
        return mse_loss(out, target)[0]

    tape = Tape()
    out = model.forward(x, masks, TRAIN, Rng(seed), tape)
    _, dout = mse_loss(out, target)
    grads = model.backward(tape, dout)
    checks = []
    for name, arr in model.parameters():
        def f(values, arr=arr):
            saved = arr.copy()
            arr[...] = values
            try:
                return loss_of()
            finally:
                arr[...] = saved
        numeric = finite_diff_grad(f, arr.copy(), eps)
        checks.append(ParamCheck(name, relative_error(grads[name], numeric), arr.size))
    model.set_bn_frozen(False)
    return GradcheckReport(model.spec.tag, checks)


def check_variant(tag: str, seed: int = 0, batch: int = 4, **dims) -> GradcheckReport:
    spec = preset(tag, seed=seed, **{**TINY_DIMS, **dims})
    model = PoseModel(spec)
    rng = Rng(seed).split("gradcheck")
    randomize_statistics(model, rng)
    x = rng.normal(0.0, 1.0, (batch, spec.input_dim))
    target = rng.normal(0.0, 1.0, (batch, spec.output_dim))
    report = check_model(model, x, target, fixed_masks(spec, batch), seed)
    report.tag = tag
    return report
