"""Joint-position error metrics. Inputs are (T, J, 3) arrays in millimeters."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

M_TO_MM = 1000.0


class AlignmentDegenerateError(ValueError):
    """Point set too degenerate for a similarity alignment."""


def _pair(pred, gt, min_frames: int = 1):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError("joint sequences must be (T, J, 3)")
    if pred.shape[0] < min_frames:
        raise ValueError(f"need at least {min_frames} frames")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise ValueError("joint positions must be finite")
    return pred, gt


def mpjpe(pred, gt) -> float:
    """Mean joint distance after subtracting the root joint (index 0) per frame."""
    pred, gt = _pair(pred, gt)
    d = (pred - pred[:, :1]) - (gt - gt[:, :1])
    return float(np.linalg.norm(d, axis=-1).mean())


def similarity_align(src, dst):
    """Least-squares s, R, t with s R src + t ~ dst for (J, 3) point sets (Umeyama)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    var_s = np.sum(a * a)
    if var_s < 1e-12 * max(1.0, np.sum(b * b)):
        raise AlignmentDegenerateError("source points coincide")
    U, sig, Vt = np.linalg.svd(b.T @ a)
    if sig[1] < 1e-9 * sig[0]:
        raise AlignmentDegenerateError("points are collinear")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    s = np.trace(np.diag(sig) @ D) / var_s
    return s, R, mu_d - s * R @ mu_s


def pa_mpjpe(pred, gt) -> float:
    """Mean joint distance after per-frame similarity Procrustes alignment of pred onto gt."""
    pred, gt = _pair(pred, gt)
    if pred.shape[1] < 3:
        raise AlignmentDegenerateError("need at least 3 joints")
    errs = []
    for p, g in zip(pred, gt):
        s, R, t = similarity_align(p, g)
        errs.append(np.linalg.norm(s * p @ R.T + t - g, axis=-1).mean())
    return float(np.mean(errs))


def accel_error(pred, gt) -> float:
    """Mean norm of the difference of second differences (mm/frame^2)."""
    pred, gt = _pair(pred, gt, min_frames=3)
    a = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    b = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    return float(np.linalg.norm(a - b, axis=-1).mean())


METRIC_NAMES = ("mpjpe", "pa_mpjpe", "accel", "residual_metric")


def evaluate_sequence(pred_mm, gt_mm, residual: float) -> dict:
    return {"mpjpe": mpjpe(pred_mm, gt_mm), "pa_mpjpe": pa_mpjpe(pred_mm, gt_mm),
            "accel": accel_error(pred_mm, gt_mm), "residual_metric": float(residual)}


def aggregate(rows: list[dict]) -> dict:
    if not rows:
        return {k: float("nan") for k in METRIC_NAMES}
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}


def write_report(rows: list[dict], names: list[str], out_dir) -> dict:
    """Per-sequence CSV and aggregate JSON; returns the aggregate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", *METRIC_NAMES])
        for name, r in zip(names, rows):
            w.writerow([name, *(repr(r[k]) for k in METRIC_NAMES)])
    agg = aggregate(rows)
    (out / "metrics.json").write_text(json.dumps(agg, indent=2) + "\n")
    return agg
