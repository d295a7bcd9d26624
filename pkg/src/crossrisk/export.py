"""Risk-map export: dependency-free 8-bit PGM heatmaps plus exact-value CSV.

PGM is display-only: values are clamped at zero, min-max scaled over valid
cells, and invalid cells render black. The CSV carries full-precision values
(repr round-trips float64 exactly).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def scale_to_bytes(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Clamp at 0 and min-max scale valid cells to 0..255; invalid cells -> 0."""
    vals = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    m = np.asarray(mask, dtype=bool)
    out = np.zeros(vals.shape, dtype=np.uint8)
    if m.any():
        lo = vals[m].min()
        hi = vals[m].max()
        if hi > lo:
            out[m] = np.round(255.0 * (vals[m] - lo) / (hi - lo)).astype(np.uint8)
        else:
            out[m] = 255
    return out


def write_pgm(path, values: np.ndarray, mask: np.ndarray) -> None:
    """Binary PGM (P5), header ``P5 <w> <h> 255``; w columns, h rows."""
    w, h = values.shape
    raster = scale_to_bytes(values, mask).T  # rows are the second grid axis
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def write_pair_pgm(path, pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> None:
    """Prediction and truth side by side with a one-pixel divider."""
    w, h = pred.shape
    left = scale_to_bytes(pred, mask)
    right = scale_to_bytes(truth, mask)
    divider = np.full((1, h), 255, dtype=np.uint8)
    combined = np.concatenate([left, divider, right], axis=0)  # (2w+1, h)
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{2 * w + 1} {h}\n255\n".encode("ascii"))
        fh.write(combined.T.tobytes())


def write_values_csv(path, pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> None:
    w, h = pred.shape
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "valid", "prediction", "truth"])
        for x in range(w):
            for y in range(h):
                writer.writerow([x, y, int(mask[x, y]), repr(float(pred[x, y])), repr(float(truth[x, y]))])


def read_values_csv(path) -> tuple:
    """Inverse of write_values_csv: (pred, truth, mask) arrays."""
    rows = list(csv.DictReader(open(Path(path), newline="")))
    w = max(int(r["x"]) for r in rows) + 1
    h = max(int(r["y"]) for r in rows) + 1
    pred = np.zeros((w, h))
    truth = np.zeros((w, h))
    mask = np.zeros((w, h), dtype=bool)
    for r in rows:
        x, y = int(r["x"]), int(r["y"])
        pred[x, y] = float(r["prediction"])
        truth[x, y] = float(r["truth"])
        mask[x, y] = bool(int(r["valid"]))
    return pred, truth, mask
