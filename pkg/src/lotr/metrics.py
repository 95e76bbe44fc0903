"""Landmark evaluation metrics: normalized mean error, failure rate, and
the area under the cumulative error distribution."""

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    nmes: list
    threshold: float
    failure_rate: float
    auc: float
    ced: list  # (nme, fraction of images at or below it)

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "mean_nme": float(np.mean(self.nmes)),
            "failure_rate": self.failure_rate,
            "auc": self.auc,
            "count": len(self.nmes),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    def write_ced_csv(self, path):
        with open(path, "w") as fh:
            fh.write("nme_threshold,fraction\n")
            for err, frac in self.ced:
                fh.write(f"{err},{frac}\n")


def nme(target, pred, d):
    """Mean Euclidean landmark error divided by the normalization factor ``d``."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if d <= 0:
        raise ValueError(f"normalization factor must be positive, got {d}")
    if target.shape != pred.shape:
        raise ValueError(f"landmark count mismatch: {target.shape} vs {pred.shape}")
    return float(np.linalg.norm(target - pred, axis=1).mean() / d)


def norm_factor(landmarks, mode="bbox-geomean", eye_indices=None):
    """Face-scale normalization from ground-truth landmarks.

    ``bbox-geomean`` is sqrt(width * height) of the tight axis-aligned box;
    ``inter-ocular`` is the distance between the two outer eye corners.
    """
    pts = np.asarray(landmarks, dtype=np.float64)
    if mode == "bbox-geomean":
        span = pts.max(axis=0) - pts.min(axis=0)
        area = span[0] * span[1]
        if area <= 0:
            raise ValueError("degenerate landmark bounding box (zero area)")
        return float(np.sqrt(area))
    if mode == "inter-ocular":
        if eye_indices is None or len(eye_indices) != 2 or eye_indices[0] == eye_indices[1]:
            raise ValueError("inter-ocular mode needs two distinct eye corner indices")
        dist = float(np.linalg.norm(pts[eye_indices[0]] - pts[eye_indices[1]]))
        if dist <= 0:
            raise ValueError("coincident outer eye corners")
        return dist
    raise ValueError(f"unknown normalization mode {mode!r}")


def evaluate(nmes, threshold):
    """Failure rate and exact step-function CED integral on [0, threshold].

    AUC = (1 / (M * T)) * sum_i max(0, T - nme_i), the exact area under the
    empirical cumulative error distribution normalized to [0, 1].
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    errs = np.asarray(list(nmes), dtype=np.float64)
    if errs.size == 0:
        raise ValueError("no NME values to evaluate")
    if (errs < 0).any():
        raise ValueError("NME values must be non-negative")
    m = errs.size
    failure_rate = float((errs > threshold).sum() / m)
    auc = float(np.maximum(0.0, threshold - errs).sum() / (m * threshold))
    ced = [(float(e), float((errs <= e).sum() / m)) for e in np.unique(errs)]
    return MetricsReport(nmes=[float(e) for e in errs], threshold=float(threshold),
                         failure_rate=failure_rate, auc=auc, ced=ced)
