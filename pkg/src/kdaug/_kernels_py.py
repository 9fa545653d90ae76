"""Pure numpy implementations of the kernels in ``_kernels.pyx``."""
import numpy as np


def removal_fill(x, starts, lengths):
    x = np.asarray(x)
    if len(starts) != x.shape[0] or len(lengths) != x.shape[0]:
        raise ValueError("starts/lengths must have one entry per row")
    T = x.shape[2]
    for b, (s, n) in enumerate(zip(starts, lengths)):
        if n <= 1:
            continue
        if s < 0 or s + n > T:
            raise ValueError(f"segment [{s}, {s + n}) outside window of length {T}")
        x[b, :, s + 1:s + n] = x[b, :, s:s + 1]
    return x


def roll_time(x, shifts):
    x = np.asarray(x)
    if len(shifts) != x.shape[0]:
        raise ValueError("shifts must have one entry per row")
    out = np.empty_like(x)
    for b, k in enumerate(shifts):
        out[b] = np.roll(x[b], int(k), axis=-1)
    return out


def calibration_bins(confidence, correct, edges):
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct)
    if correct.shape[0] != confidence.shape[0]:
        raise ValueError("confidence and correct must have equal length")
    n_bins = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    conf_sum = np.bincount(idx, weights=confidence, minlength=n_bins)
    hits = np.bincount(idx, weights=correct.astype(np.float64), minlength=n_bins).astype(np.int64)
    return counts, conf_sum, hits
