"""Gaussian heatmap targets and argmax decoding, used to quantify the
post-processing cost and quantization error of heatmap-style localization."""

import time
from dataclasses import dataclass

import numpy as np


@dataclass
class Heatmap:
    grid: np.ndarray      # H x W, values in (0, 1]
    landmark: tuple       # (x0, y0) in float pixels
    sigma: float


def render_heatmap(landmark, size, sigma=2.0):
    """Sample exp(-((x-x0)^2 + (y-y0)^2) / (2 sigma^2)) at integer pixels."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = size
    x0, y0 = landmark
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    grid = np.exp(-((xs - x0) ** 2 + (ys - y0) ** 2) / (2.0 * sigma * sigma))
    return Heatmap(grid=grid, landmark=(float(x0), float(y0)), sigma=float(sigma))


def decode_argmax(heatmap):
    """(x, y) of the maximum value; ties break to the smallest row-major index."""
    grid = heatmap.grid
    idx = int(np.argmax(grid))
    return idx % grid.shape[1], idx // grid.shape[1]


def benchmark_decode(heatmaps, truths=None):
    """Wall-clock per decode plus mean quantization error against truth.

    Returns a dict with per-decode seconds and, when ground truth is given,
    the mean absolute error per coordinate axis.
    """
    start = time.perf_counter()
    decoded = [decode_argmax(h) for h in heatmaps]
    elapsed = time.perf_counter() - start
    report = {
        "count": len(heatmaps),
        "seconds_per_decode": elapsed / max(1, len(heatmaps)),
    }
    if truths is not None:
        diffs = np.abs(np.asarray(decoded, dtype=np.float64) - np.asarray(truths, dtype=np.float64))
        report["mean_abs_error_per_axis"] = float(diffs.mean())
    return report
