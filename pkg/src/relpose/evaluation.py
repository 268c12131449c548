"""MPJPE, root (Protocol 1) and Procrustes (Protocol 2) alignment, and
scenario-driven evaluation reports."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import PoseModel, mask_from_visibility
from .numerics import Rng, svd3
from .skeleton import ROOT, SCENARIOS, Dataset, make_missing, postprocess, preprocess

PROTOCOLS = ("p1", "p2")


def mpjpe(pred, gt) -> float:
    """Mean Euclidean distance over joints, (J, 3) each."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def align_protocol1(pred, gt, stats) -> np.ndarray:
    """De-normalise a 45-vector and attach its root at the ground-truth root."""
    gt = np.asarray(gt, dtype=np.float64)
    return postprocess(np.asarray(pred).reshape(1, -1), stats, gt[ROOT][None])[0]


def procrustes_params(pred, gt):
    """Similarity transform (s, R, t) minimising ||s * pred @ R + t - gt||_F.

    R is a proper rotation (reflections are excluded).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    var_p = float(np.sum(p0 * p0))
    if var_p <= 1e-12 * max(1.0, float(np.sum(g0 * g0))):
        raise ValueError("prediction has zero variance; Procrustes alignment undefined")
    u, s, vt = svd3(p0.T @ g0)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag(d) @ vt
    scale = float(np.sum(s * d)) / var_p
    trans = mu_g - scale * mu_p @ rot
    return scale, rot, trans


def align_protocol2(pred, gt) -> np.ndarray:
    scale, rot, trans = procrustes_params(pred, gt)
    return scale * np.asarray(pred, dtype=np.float64) @ rot + trans


# --------------------------------------------------------------------------
# scenario evaluation


@dataclass
class EvalRow:
    model: str
    scenario: str
    protocol: str
    mpjpe: float
    count: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    dataset_id: str = ""
    model_hash: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "scenario", "protocol", "mpjpe_mm", "count"])
        for r in self.rows:
            w.writerow([r.model, r.scenario, r.protocol, f"{r.mpjpe:.6f}", r.count])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"dataset {self.dataset_id}  model {self.model_hash}"]
        lines.append(f"{'model':<14}{'scenario':<10}{'protocol':<10}{'MPJPE (mm)':>12}{'n':>8}")
        for r in self.rows:
            lines.append(f"{r.model:<14}{r.scenario:<10}{r.protocol:<10}{r.mpjpe:>12.2f}{r.count:>8}")
        return "\n".join(lines) + "\n"

    def lookup(self, scenario: str, protocol: str = "p1", model: str | None = None) -> float:
        for r in self.rows:
            if r.scenario == scenario and r.protocol == protocol and (model is None or r.model == model):
                return r.mpjpe
        raise KeyError((scenario, protocol, model))

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        path.with_suffix(".txt").write_text(self.to_text(), encoding="utf-8")


def scenario_visibility(scenario: str, n: int, seed: int) -> np.ndarray:
    return make_missing(scenario, Rng(seed).split(f"scenario:{scenario}"), n)


def predict_poses(model: PoseModel, dataset: Dataset, visibility: np.ndarray,
                  chunk: int = 512) -> np.ndarray:
    """Eval-mode predictions (N, 16, 3) with the root at the GT root."""
    if model.stats is None:
        raise ValueError("model has no normalisation statistics")
    masked = Dataset(dataset.sample_ids, dataset.subjects, dataset.actions,
                     dataset.joints2d, dataset.joints3d, dataset.visibility & visibility)
    inputs, _, _ = preprocess(masked, model.stats)
    use_masks = model.spec.uses_relational_dropout
    out = np.empty((len(dataset), 45))
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        masks = None
        if use_masks:
            masks = [mask_from_visibility(v, model.spec) for v in masked.visibility[sl]]
        out[sl] = model.predict(inputs[sl], masks)
    return postprocess(out, model.stats, dataset.joints3d[:, ROOT])


def per_sample_errors(pred_poses, gt_poses, protocol: str) -> np.ndarray:
    if protocol == "p1":
        return np.linalg.norm(pred_poses - gt_poses, axis=-1).mean(axis=-1)
    if protocol == "p2":
        return np.array([mpjpe(align_protocol2(p, g), g) for p, g in zip(pred_poses, gt_poses)])
    raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def evaluate(model: PoseModel, dataset: Dataset, scenario: str = "none", protocol: str = "p1",
             seed: int = 0, tag: str | None = None) -> EvalRow:
    vis = scenario_visibility(scenario, len(dataset), seed)
    pred = predict_poses(model, dataset, vis)
    err = per_sample_errors(pred, dataset.joints3d, protocol)
    return EvalRow(tag or model.spec.tag, scenario, protocol, math.fsum(err) / len(err), len(err))


def evaluate_all(model: PoseModel, dataset: Dataset, scenarios=SCENARIOS, protocols=PROTOCOLS,
                 seed: int = 0, tag: str | None = None, dataset_id: str = "",
                 model_hash: str = "") -> EvalReport:
    """Rows ordered scenario-major (none, rand2, larm, rleg), then p1, p2."""
    report = EvalReport(dataset_id=dataset_id, model_hash=model_hash)
    for scenario in scenarios:
        vis = scenario_visibility(scenario, len(dataset), seed)
        pred = predict_poses(model, dataset, vis)
        for protocol in protocols:
            err = per_sample_errors(pred, dataset.joints3d, protocol)
            report.rows.append(EvalRow(tag or model.spec.tag, scenario, protocol,
                                       math.fsum(err) / len(err), len(err)))
    return report


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
