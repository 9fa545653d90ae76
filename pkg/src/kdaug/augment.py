"""Time-domain augmentations: removal, noise injection, shifting and their mixes.

Every random draw comes from a stream keyed by ``(seed, epoch, sample index)``
so a sample's augmentation does not depend on batch composition, worker
count, or the order in which samples are visited.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _backend
from .dataio import Window

KINDS = ("none", "removal", "noise", "shift", "mix1", "mix2")
# transforms applied per kind, in order
_PIPELINES = {
    "none": (),
    "removal": ("removal",),
    "noise": ("noise",),
    "shift": ("shift",),
    "mix1": ("removal", "shift"),
    "mix2": ("removal", "noise", "shift"),
}


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str = "none"
    max_removal_frac: float = 0.5
    max_noise_std: float = 0.2
    max_shift_frac: float = 0.5
    apply_probability: float = 1.0
    # Per-window random subset of channel groups (e.g. one group per IMU);
    # unset means every channel is transformed.
    channel_groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "none":
            return
        if not 0 < self.max_removal_frac <= 1:
            raise ValueError("max_removal_frac must be in (0, 1]")
        if not self.max_noise_std >= 0:
            raise ValueError("max_noise_std must be >= 0")
        if not 0 < self.max_shift_frac <= 1:
            raise ValueError("max_shift_frac must be in (0, 1]")
        if not 0 < self.apply_probability <= 1:
            raise ValueError("apply_probability must be in (0, 1]")
        if self.channel_groups is not None:
            object.__setattr__(self, "channel_groups",
                               tuple(tuple(int(c) for c in g) for g in self.channel_groups))

    @classmethod
    def from_dict(cls, d: dict | str | None) -> "AugmentationPolicy":
        if d is None:
            return cls()
        if isinstance(d, str):
            return cls(kind=d)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["channel_groups"] is not None:
            d["channel_groups"] = [list(g) for g in d["channel_groups"]]
        return d


# Bounds used for the two dataset profiles.
GENEACTIV_BOUNDS = dict(max_removal_frac=0.5, max_noise_std=0.2, max_shift_frac=0.5)
PAMAP2_BOUNDS = dict(max_removal_frac=0.1, max_noise_std=0.1, max_shift_frac=0.5)


def rng_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent generator for one sample of one epoch."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(epoch), int(index)])


# ---------------------------------------------------------------------------
# parameter draws (shared by the single-window and batch paths)


def draw_removal(rng: np.random.Generator, T: int, max_frac: float) -> tuple[int, int]:
    """Return ``(start, length)``; length 0 means no-op."""
    n_max = math.floor(max_frac * T)
    if n_max < 1:
        return 0, 0
    n = int(rng.integers(1, n_max + 1))
    t = int(rng.integers(0, T - n + 1))
    return t, n


def draw_noise(rng: np.random.Generator, shape, max_std: float) -> np.ndarray | None:
    sigma = rng.uniform(0.0, max_std)
    if sigma == 0.0:
        return None
    return rng.normal(0.0, sigma, size=shape)


def draw_shift(rng: np.random.Generator, T: int, max_frac: float) -> int:
    return int(rng.integers(0, math.floor(max_frac * T) + 1))


# ---------------------------------------------------------------------------
# single-window transforms


def _as_batch(data: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(data)[None].copy()


def apply_removal(data: np.ndarray, start: int, length: int) -> np.ndarray:
    x = _as_batch(data)
    _backend.removal_fill(x, np.array([start], np.int64), np.array([length], np.int64))
    return x[0]


def apply_shift(data: np.ndarray, k: int) -> np.ndarray:
    return _backend.roll_time(np.ascontiguousarray(data)[None], np.array([k], np.int64))[0]


def removal(w: Window, rng: np.random.Generator, max_frac: float) -> Window:
    """Flatten a random run of samples to the run's first value, in every channel."""
    t, n = draw_removal(rng, w.data.shape[-1], max_frac)
    return Window(apply_removal(w.data, t, n), w.label, w.subject_id)


def noise_injection(w: Window, rng: np.random.Generator, max_std: float) -> Window:
    """Add N(0, sigma^2) noise with one sigma ~ U[0, max_std] drawn per window."""
    noise = draw_noise(rng, w.data.shape, max_std)
    if noise is None:
        return Window(w.data.copy(), w.label, w.subject_id)
    return Window((w.data + noise).astype(w.data.dtype), w.label, w.subject_id)


def shift(w: Window, rng: np.random.Generator, max_frac: float) -> Window:
    """Circular right-roll of all channels by k ~ U{0..floor(max_frac*T)}."""
    k = draw_shift(rng, w.data.shape[-1], max_frac)
    return Window(apply_shift(w.data, k), w.label, w.subject_id)


def _run_pipeline(w: Window, rng: np.random.Generator, policy: AugmentationPolicy, steps) -> Window:
    for step in steps:
        if step == "removal":
            w = removal(w, rng, policy.max_removal_frac)
        elif step == "noise":
            w = noise_injection(w, rng, policy.max_noise_std)
        else:
            w = shift(w, rng, policy.max_shift_frac)
    return w


def mix1(w: Window, rng: np.random.Generator, policy: AugmentationPolicy) -> Window:
    """Removal followed by shift."""
    return _run_pipeline(w, rng, policy, _PIPELINES["mix1"])


def mix2(w: Window, rng: np.random.Generator, policy: AugmentationPolicy) -> Window:
    """Removal, then noise, then shift."""
    return _run_pipeline(w, rng, policy, _PIPELINES["mix2"])


def augment_window(w: Window, rng: np.random.Generator, policy: AugmentationPolicy) -> Window:
    return _run_pipeline(w, rng, policy, _PIPELINES[policy.kind])


# ---------------------------------------------------------------------------
# batch path


def _draw_channel_mask(rng, groups, C) -> np.ndarray:
    chosen = rng.random(len(groups)) < 0.5
    if not chosen.any():
        chosen[rng.integers(0, len(groups))] = True
    mask = np.zeros(C, dtype=bool)
    for g, use in zip(groups, chosen):
        if use:
            mask[list(g)] = True
    return mask


def apply_policy(X: np.ndarray, policy: AugmentationPolicy, epoch: int, seed: int,
                 indices=None) -> np.ndarray:
    """Augment a batch ``X`` of shape (B, C, T).

    ``indices`` are the dataset positions of the rows (default ``arange(B)``);
    they key each row's random stream together with ``seed`` and ``epoch``.
    Returns a new array; ``X`` is never modified. ``kind="none"`` returns
    ``X`` itself.
    """
    if policy.kind == "none":
        return X
    X = np.asarray(X)
    B, C, T = X.shape
    if indices is None:
        indices = np.arange(B)
    if len(indices) != B:
        raise ValueError("indices must have one entry per row")
    steps = _PIPELINES[policy.kind]
    starts = np.zeros(B, np.int64)
    lengths = np.zeros(B, np.int64)
    shifts = np.zeros(B, np.int64)
    noise = np.zeros(X.shape, np.float64) if "noise" in steps else None
    masks = np.ones((B, C), bool) if policy.channel_groups else None
    for b, idx in enumerate(indices):
        rng = rng_stream(seed, epoch, idx)
        if policy.apply_probability < 1.0 and rng.random() >= policy.apply_probability:
            continue
        if masks is not None:
            masks[b] = _draw_channel_mask(rng, policy.channel_groups, C)
        for step in steps:
            if step == "removal":
                starts[b], lengths[b] = draw_removal(rng, T, policy.max_removal_frac)
            elif step == "noise":
                nz = draw_noise(rng, (C, T), policy.max_noise_std)
                if nz is not None:
                    noise[b] = nz
            else:
                shifts[b] = draw_shift(rng, T, policy.max_shift_frac)
    out = np.ascontiguousarray(X).copy()
    if "removal" in steps:
        _backend.removal_fill(out, starts, lengths)
    if noise is not None:
        # per-row cast keeps bit-equality with the single-window path
        out = (out + noise).astype(X.dtype)
    if "shift" in steps:
        out = _backend.roll_time(out, shifts)
    if masks is not None:
        out = np.where(masks[:, :, None], out, X)
    return out


def augment_windows(windows, policy: AugmentationPolicy, epoch: int, seed: int) -> list[Window]:
    """Sequence-of-Window convenience wrapper around :func:`apply_policy`."""
    windows = list(windows)
    if not windows:
        return []
    X = np.stack([w.data for w in windows])
    out = apply_policy(X, policy, epoch, seed)
    return [Window(out[i], w.label, w.subject_id) for i, w in enumerate(windows)]
