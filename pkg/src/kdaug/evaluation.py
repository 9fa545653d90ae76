"""Accuracy, calibration, significance testing, aggregation and latency timing."""
from __future__ import annotations

import math
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import special

from . import _backend


def _predictions(logits_or_preds) -> np.ndarray:
    a = np.asarray(logits_or_preds)
    if a.ndim == 2:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        return a.argmax(axis=1)
    if a.ndim == 1:
        return a.astype(np.int64)
    raise ValueError(f"expected logits (N, K) or predictions (N,), got shape {a.shape}")


def accuracy(logits_or_preds, labels) -> float:
    """Percentage of correct predictions; accepts logits/probabilities or class ids."""
    if torch.is_tensor(logits_or_preds):
        logits_or_preds = logits_or_preds.detach().cpu().numpy()
    pred = _predictions(logits_or_preds)
    labels = np.asarray(labels)
    if len(pred) == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    if len(pred) != len(labels):
        raise ValueError(f"{len(pred)} predictions vs {len(labels)} labels")
    return 100.0 * float(np.mean(pred == labels))


def ece(probabilities, labels, n_bins: int = 15) -> float:
    """Expected calibration error in percent, equal-width bins on max probability.

    Bin m covers ``(m/n_bins, (m+1)/n_bins]``; empty bins contribute nothing.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("probabilities must be a non-empty (N, K) array")
    if len(labels) != len(p):
        raise ValueError(f"{len(p)} rows vs {len(labels)} labels")
    if not np.isfinite(p).all() or (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("each row must be a probability vector summing to 1 (tolerance 1e-6)")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == labels).astype(np.uint8)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts, conf_sum, hits = _backend.calibration_bins(np.ascontiguousarray(conf), correct, edges)
    n = len(conf)
    total = 0.0
    for m in range(n_bins):
        if counts[m]:
            total += counts[m] / n * abs(hits[m] / counts[m] - conf_sum[m] / counts[m])
    return 100.0 * total


def welch_ttest(sample_a, sample_b) -> tuple[float, float]:
    """Two-sided Welch t-test; returns ``(t, p)``.

    Two zero-variance samples with equal means give ``(0.0, 1.0)``; with
    different means the statistic is undefined and ``ValueError`` is raised.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    if se2 == 0:
        if ma == mb:
            return 0.0, 1.0
        raise ValueError("both samples have zero variance but different means")
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / (sa ** 2 / (na - 1) + sb ** 2 / (nb - 1))
    # two-sided p = 2 * P(T_df > |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), min(p, 1.0)


@dataclass
class Aggregate:
    mean: float
    std: float
    n: int
    values: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        return f"{self.mean:.2f}±{self.std:.2f}"


def aggregate(values) -> Aggregate:
    """Mean and sample standard deviation (n - 1 denominator; 0 for a single run)."""
    v = [float(x) for x in values]
    if not v:
        raise ValueError("cannot aggregate an empty set of runs")
    arr = np.asarray(v)
    std = float(arr.std(ddof=1)) if len(v) > 1 else 0.0
    return Aggregate(float(arr.mean()), std, len(v), v)


@dataclass
class EvalReport:
    accuracy: float
    ece: float
    per_class_accuracy: list[float]
    confusion: list[list[int]]
    n_samples: int
    run_id: str = ""
    checkpoint_epoch: int | None = None
    test_aug: str = "none"
    n_bins: int = 15

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(pred, labels, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(pred)), 1)
    return cm


def evaluation_report(logits, labels, n_classes: int, n_bins: int = 15, **provenance) -> EvalReport:
    logits = torch.as_tensor(logits, dtype=torch.float64)
    probs = torch.softmax(logits, dim=1).numpy()
    labels = np.asarray(labels)
    pred = _predictions(probs)
    cm = confusion_matrix(pred, labels, n_classes)
    support = cm.sum(axis=1)
    per_class = [float(100.0 * cm[i, i] / support[i]) if support[i] else float("nan") for i in range(n_classes)]
    return EvalReport(accuracy(pred, labels), ece(probs, labels, n_bins), per_class, cm.tolist(), int(len(labels)),
                      n_bins=n_bins, **provenance)


@torch.no_grad()
def timing_benchmark(model: torch.nn.Module, windows, device: str = "cpu", warmup: int = 50,
                     min_samples: int = 100) -> dict:
    """Per-sample inference latency at batch size 1.

    Every window is timed individually after ``warmup`` untimed passes; the
    total is the sum of the per-sample times. Run with nothing else loading
    the machine.
    """
    X = np.asarray(windows, dtype=np.float32)
    if len(X) < min_samples:
        raise ValueError(f"timing needs at least {min_samples} samples, got {len(X)}")
    dev = torch.device(device)
    model = model.to(dev).eval()
    xs = torch.from_numpy(X).to(dev)
    sync = torch.cuda.synchronize if dev.type == "cuda" else (lambda: None)
    for i in range(warmup):
        model(xs[i % len(xs)][None])
    sync()
    times = np.empty(len(xs))
    for i in range(len(xs)):
        t0 = time.perf_counter()
        model(xs[i][None])
        sync()
        times[i] = time.perf_counter() - t0
    total = float(times.sum())
    return {
        "device": device,
        "device_label": (platform.processor() or platform.machine()) if dev.type == "cpu"
        else torch.cuda.get_device_name(dev),
        "n_samples": int(len(xs)),
        "warmup": warmup,
        "batch_size": 1,
        "total_s": total,
        "avg_ms": 1000.0 * total / len(xs),
        "median_ms": 1000.0 * float(np.median(times)),
        "torch_threads": torch.get_num_threads(),
        "note": "exclusive run required: timings assume no concurrent load",
    }
