"""Dataset ingestion, windowing and subject-disjoint splits.

Two real sources are supported: the public PAMAP2 protocol files and a
generic CSV layout (used for GENEactiv-style tri-axial recordings). A seeded
synthetic generator stands in for both in tests.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CACHE_SCHEMA_VERSION = 1

# Table of the 12 protocol activities kept for PAMAP2, in reporting order.
PAMAP2_ACTIVITIES = {
    1: "lying",
    2: "sitting",
    3: "standing",
    4: "walking",
    5: "running",
    6: "cycling",
    7: "nordic walking",
    12: "ascending stairs",
    13: "descending stairs",
    16: "vacuum cleaning",
    17: "ironing",
    24: "rope jumping",
}
PAMAP2_SUBJECTS = tuple(str(s) for s in range(101, 110))
PAMAP2_N_COLUMNS = 54
_IMU_NAMES = ("hand", "chest", "ankle")
# Within each 17-column IMU block: temperature, acc16 xyz, acc6 xyz, gyro xyz,
# mag xyz, then 4 orientation columns that the dataset marks invalid.
_IMU_VALID_OFFSETS = tuple(range(13))


def pamap2_channel_columns() -> list[int]:
    """Raw column indices of the 40 retained PAMAP2 channels (heart rate first)."""
    cols = [2]
    for i in range(len(_IMU_NAMES)):
        base = 3 + 17 * i
        cols.extend(base + off for off in _IMU_VALID_OFFSETS)
    return cols


def pamap2_channel_groups() -> list[list[int]]:
    """Channel indices (into the 40-channel layout) grouped per IMU."""
    return [list(range(1 + 13 * i, 1 + 13 * (i + 1))) for i in range(len(_IMU_NAMES))]


class IngestionError(Exception):
    """Raised when a source file is missing or malformed."""


@dataclass
class Recording:
    subject_id: str
    channels: np.ndarray  # (C, T)
    sample_rate_hz: float
    labels: np.ndarray | int  # (T,) per-timestep ids, or one id for the recording

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        if self.channels.ndim != 2 or min(self.channels.shape) < 1:
            raise ValueError(f"channels must be a non-empty C x T matrix, got {self.channels.shape}")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        if not np.isscalar(self.labels):
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n_samples,):
                raise ValueError("per-timestep labels must have length T")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    def label_array(self) -> np.ndarray:
        if np.isscalar(self.labels):
            return np.full(self.n_samples, int(self.labels), dtype=np.int64)
        return self.labels


@dataclass(frozen=True, eq=False)
class Window:
    data: np.ndarray  # (C, T_w)
    label: int
    subject_id: str


class WindowSet(Sequence[Window]):
    """Array-backed sequence of windows: ``X`` (N, C, T_w), ``y`` (N,), ``subjects`` (N,)."""

    def __init__(self, X: np.ndarray, y: np.ndarray, subjects: np.ndarray):
        X = np.asarray(X)
        y = np.asarray(y, dtype=np.int64)
        subjects = np.asarray(subjects, dtype=str)
        if X.ndim != 3:
            raise ValueError(f"X must be (N, C, T), got shape {X.shape}")
        if not (len(X) == len(y) == len(subjects)):
            raise ValueError("X, y and subjects must have equal length")
        self.X, self.y, self.subjects = X, y, subjects

    @classmethod
    def from_windows(cls, windows: Sequence[Window], n_channels: int = 0, window_len: int = 0) -> "WindowSet":
        if len(windows) == 0:
            return cls(np.zeros((0, n_channels, window_len), np.float32), np.zeros(0, np.int64), np.zeros(0, str))
        X = np.stack([w.data for w in windows]).astype(np.float32, copy=False)
        y = np.array([w.label for w in windows], dtype=np.int64)
        s = np.array([w.subject_id for w in windows], dtype=str)
        return cls(X, y, s)

    @classmethod
    def concat(cls, sets: Sequence["WindowSet"]) -> "WindowSet":
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(np.concatenate([s.X for s in sets]), np.concatenate([s.y for s in sets]),
                   np.concatenate([s.subjects for s in sets]))

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return Window(self.X[i], int(self.y[i]), str(self.subjects[i]))

    def __iter__(self) -> Iterator[Window]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, mask) -> "WindowSet":
        return WindowSet(self.X[mask], self.y[mask], self.subjects[mask])

    @property
    def subject_set(self) -> set[str]:
        return set(self.subjects.tolist())


@dataclass
class NormStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,), already floored

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))


@dataclass
class DatasetSplit:
    train: WindowSet
    test: WindowSet
    class_set: tuple[int, ...]
    normalization_stats: NormStats
    normalized: bool = False
    name: str = "split"

    def __post_init__(self):
        self.class_set = tuple(int(c) for c in self.class_set)
        overlap = self.train.subject_set & self.test.subject_set
        if overlap:
            raise ValueError(f"train and test share subjects: {sorted(overlap)}")

    @property
    def n_classes(self) -> int:
        return len(self.class_set)

    def encode(self, y: np.ndarray) -> np.ndarray:
        """Map raw activity ids to class indices 0..K-1."""
        lut = {c: i for i, c in enumerate(self.class_set)}
        try:
            return np.array([lut[int(v)] for v in y], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"label {e.args[0]} not in class set {self.class_set}") from None


# ---------------------------------------------------------------------------
# ingestion


def _parse_pamap2_file(path: Path, subject: str) -> np.ndarray:
    try:
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError:
        arr = None
    if arr is not None and arr.shape[1] == PAMAP2_N_COLUMNS:
        return arr
    # Slow path only to locate the offending line.
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != PAMAP2_N_COLUMNS:
                raise IngestionError(
                    f"subject {subject}: {path}:{lineno}: expected {PAMAP2_N_COLUMNS} columns, got {len(parts)}")
            try:
                [float(p) for p in parts]
            except ValueError:
                raise IngestionError(f"subject {subject}: {path}:{lineno}: non-numeric value") from None
    raise IngestionError(f"subject {subject}: {path}: could not parse file")


def _fill_missing(values: np.ndarray) -> np.ndarray:
    """Linear interpolation inside gaps, forward/back fill at the edges (per column)."""
    df = pd.DataFrame(values)
    df = df.interpolate(method="linear", axis=0, limit_area="inside")
    df = df.ffill().bfill()
    # an all-NaN column has nothing to fill from
    return df.fillna(0.0).to_numpy()


def load_pamap2(root_path, subjects: Sequence[str] = PAMAP2_SUBJECTS,
                activities: Sequence[int] = tuple(PAMAP2_ACTIVITIES)) -> list[Recording]:
    """Read PAMAP2 ``subject1XX.dat`` protocol files into 40-channel recordings.

    Looks in ``root_path`` and ``root_path/Protocol``. Rows whose activity is
    not in ``activities`` are dropped; the heart-rate channel (sampled at
    ~9 Hz) and IMU dropouts are filled by :func:`_fill_missing`.
    """
    root = Path(root_path)
    keep = np.asarray(sorted(activities))
    cols = pamap2_channel_columns()
    recs = []
    for subject in subjects:
        candidates = [root / f"subject{subject}.dat", root / "Protocol" / f"subject{subject}.dat"]
        path = next((p for p in candidates if p.is_file()), None)
        if path is None:
            raise IngestionError(f"subject {subject}: missing file (looked for {candidates[0]} and {candidates[1]})")
        raw = _parse_pamap2_file(path, subject)
        activity = raw[:, 1].astype(np.int64)
        rows = np.isin(activity, keep)
        data = _fill_missing(raw[rows][:, cols])
        if data.shape[0] == 0:
            log.warning("subject %s has no rows for the selected activities", subject)
            continue
        recs.append(Recording(subject, data.T.astype(np.float32), 100.0, activity[rows]))
    return recs


@dataclass
class CsvSchema:
    channels: list[str]
    subject: str = "subject"
    label: str = "label"
    sample_rate_hz: float = 100.0


def load_generic_csv(path, schema: CsvSchema) -> list[Recording]:
    """Group a long-format CSV (one row per timestep) into per-subject recordings."""
    path = Path(path)
    if path.stat().st_size == 0:
        return []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        needed = [schema.subject, schema.label, *schema.channels]
        missing = [c for c in needed if c not in header]
        if missing:
            raise IngestionError(f"{path}: schema mismatch, missing columns: {', '.join(missing)}")
        si, li = header.index(schema.subject), header.index(schema.label)
        ci = [header.index(c) for c in schema.channels]
        rows: dict[str, tuple[list, list]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(row[i]) if row[i].strip() != "" else np.nan for i in ci]
                lab = int(float(row[li]))
            except (ValueError, IndexError):
                raise IngestionError(f"{path}:{lineno}: malformed row") from None
            data, labs = rows.setdefault(row[si].strip(), ([], []))
            data.append(vals)
            labs.append(lab)
    recs = []
    for subject in sorted(rows):
        data, labs = rows[subject]
        arr = np.asarray(data, dtype=np.float64)
        if np.isnan(arr).any():
            arr = _fill_missing(arr)
        recs.append(Recording(subject, arr.T.astype(np.float32), schema.sample_rate_hz, np.asarray(labs)))
    return recs


def downsample(rec: Recording, factor: int) -> Recording:
    """Decimate by keeping every ``factor``-th sample (no anti-alias filter)."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downsample factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return rec
    labels = rec.labels if np.isscalar(rec.labels) else rec.labels[::factor]
    return replace(rec, channels=rec.channels[:, ::factor].copy(),
                   sample_rate_hz=rec.sample_rate_hz / factor, labels=labels)


def window_count(T: int, window_len: int, step: int) -> int:
    if window_len > T:
        return 0
    return (T - window_len) // step + 1


def segment_windows(rec: Recording, window_len: int, step: int, pure_only: bool = True) -> list[Window]:
    """Slide a window over ``rec``; starts at 0, step, 2*step, ...

    With ``pure_only`` windows that span a label change are dropped; otherwise
    the majority label wins (ties go to the smaller id).
    """
    if window_len < 1 or step < 1:
        raise ValueError("window_len and step must be >= 1")
    T = rec.n_samples
    labels = rec.label_array()
    out = []
    for k in range(window_count(T, window_len, step)):
        s = k * step
        lab = labels[s:s + window_len]
        if lab[0] == lab[-1] and (lab == lab[0]).all():
            label = int(lab[0])
        elif pure_only:
            continue
        else:
            counts = Counter(lab.tolist())
            top = max(counts.values())
            label = min(c for c, n in counts.items() if n == top)
        out.append(Window(rec.channels[:, s:s + window_len], label, rec.subject_id))
    return out


def _windows_by_subject(recs: Sequence[Recording], window_len: int, step: int, pure_only: bool,
                        class_set: Sequence[int] | None) -> dict[str, WindowSet]:
    per_subject: dict[str, list[Window]] = {}
    for rec in recs:
        ws = segment_windows(rec, window_len, step, pure_only)
        if class_set is not None:
            ws = [w for w in ws if w.label in class_set]
        per_subject.setdefault(rec.subject_id, []).extend(ws)
    C = recs[0].n_channels if recs else 0
    return {s: WindowSet.from_windows(w, C, window_len) for s, w in sorted(per_subject.items())}


def compute_norm_stats(train: WindowSet, std_floor: float = 1e-8) -> NormStats:
    if len(train) == 0:
        raise ValueError("cannot compute normalization statistics on an empty train set")
    X = train.X.astype(np.float64)
    mean = X.mean(axis=(0, 2))
    std = np.maximum(X.std(axis=(0, 2)), std_floor)
    return NormStats(mean, std)


def _class_set(recs, class_set):
    if class_set is not None:
        return tuple(int(c) for c in class_set)
    ids = set()
    for r in recs:
        ids.update(np.unique(r.label_array()).tolist())
    return tuple(sorted(ids))


def loso_splits(recs: Sequence[Recording], window_len: int, step: int, pure_only: bool = True,
                class_set: Sequence[int] | None = None) -> list[DatasetSplit]:
    """One split per subject: that subject's windows are the test set."""
    classes = _class_set(recs, class_set)
    by_subject = _windows_by_subject(recs, window_len, step, pure_only, classes)
    subjects = list(by_subject)
    if len(subjects) < 2:
        raise ValueError(f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}")
    splits = []
    for held in subjects:
        train = WindowSet.concat([by_subject[s] for s in subjects if s != held])
        test = by_subject[held]
        splits.append(DatasetSplit(train, test, classes, compute_norm_stats(train), name=f"loso-{held}"))
    return splits


def holdout_split(recs: Sequence[Recording], window_len: int, step: int, test_subjects: Sequence[str],
                  pure_only: bool = True, class_set: Sequence[int] | None = None) -> DatasetSplit:
    """Subject-disjoint train/test split with an explicit test subject list."""
    classes = _class_set(recs, class_set)
    by_subject = _windows_by_subject(recs, window_len, step, pure_only, classes)
    test_ids = {str(s) for s in test_subjects}
    unknown = test_ids - set(by_subject)
    if unknown:
        raise ValueError(f"test subjects not present: {sorted(unknown)}")
    train_sets = [w for s, w in by_subject.items() if s not in test_ids]
    if not train_sets:
        raise ValueError("holdout split leaves no training subjects")
    train = WindowSet.concat(train_sets)
    test = WindowSet.concat([by_subject[s] for s in sorted(test_ids)])
    return DatasetSplit(train, test, classes, compute_norm_stats(train), name="holdout")


def normalize(split: DatasetSplit) -> DatasetSplit:
    """Z-score both sides with the train statistics stored on the split."""
    if len(split.train) == 0:
        raise ValueError("normalize needs a non-empty train set")
    if split.normalized:
        return split
    st = split.normalization_stats
    mean = st.mean[None, :, None]
    std = st.std[None, :, None]

    def z(ws: WindowSet) -> WindowSet:
        X = ((ws.X.astype(np.float64) - mean) / std).astype(np.float32)
        return WindowSet(X, ws.y, ws.subjects)

    return replace(split, train=z(split.train), test=z(split.test), normalized=True)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticConfig:
    n_classes: int = 4
    n_subjects: int = 8
    channels: int = 3
    T: int = 128
    windows_per_class: int = 10
    seed: int = 0
    separation: float = 1.0
    noise_std: float = 0.3
    sample_rate_hz: float = 32.0

    def __post_init__(self):
        for name in ("n_classes", "n_subjects", "channels", "T", "windows_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def make_synthetic(cfg: SyntheticConfig) -> list[Recording]:
    """Seeded multi-subject corpus with class-dependent structure.

    Class c: a sinusoid at a class-specific frequency plus a class-specific
    shapelet (a Gaussian bump of class-specific width and per-channel sign)
    at a random position, scaled by a per-subject gain, plus white noise.
    Class identity is carried by shape, not by position, so circular shifts
    preserve labels as they do for activity data. ``separation`` scales the
    spread of frequencies and bump amplitude. Each subject gets one recording
    with one contiguous bout per class, ``windows_per_class * T`` samples long.
    """
    rng = np.random.default_rng(cfg.seed)
    K, C, T, W = cfg.n_classes, cfg.channels, cfg.T, cfg.windows_per_class
    base_freq = 2.0  # cycles per window
    freqs = base_freq * (1.0 + 0.35 * cfg.separation * np.arange(K))
    widths = 0.02 + 0.06 * np.arange(K) / max(K - 1, 1)  # fraction of the window
    chan_mix = rng.normal(1.0, 0.3, size=(K, C))
    bump_sign = rng.choice([-1.0, 1.0], size=(K, C))
    t = np.arange(T)
    recs = []
    for s in range(cfg.n_subjects):
        gain = rng.uniform(0.7, 1.3, size=C)
        bouts, labels = [], []
        for c in range(K):
            # independent phase and bump position per window-length segment
            phase = rng.uniform(0, 2 * np.pi, size=(W, C, 1))
            centre = rng.uniform(0.0, 1.0, size=(W, 1, 1))
            sig = np.sin(2 * np.pi * freqs[c] * t / T + phase) * chan_mix[c][None, :, None]
            d = (t / T - centre + 0.5) % 1.0 - 0.5  # circular distance to the bump centre
            bump = np.exp(-0.5 * (d / widths[c]) ** 2) * cfg.separation * 1.5
            sig = sig + bump * bump_sign[c][None, :, None]
            sig = sig * gain[None, :, None] + rng.normal(0.0, cfg.noise_std, size=sig.shape)
            bouts.append(np.concatenate(list(sig), axis=1))
            labels.append(np.full(W * T, c, dtype=np.int64))
        recs.append(Recording(f"s{s:03d}", np.concatenate(bouts, axis=1).astype(np.float32),
                              cfg.sample_rate_hz, np.concatenate(labels)))
    return recs


# ---------------------------------------------------------------------------
# window cache


def save_split(split: DatasetSplit, directory, extra_meta: dict | None = None) -> Path:
    """Write a split as raw ``.npy`` arrays plus a ``meta.json`` sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for side in ("train", "test"):
        ws: WindowSet = getattr(split, side)
        np.save(d / f"{side}_X.npy", np.ascontiguousarray(ws.X, dtype=np.float32))
        np.save(d / f"{side}_y.npy", ws.y.astype(np.int64))
        np.save(d / f"{side}_subjects.npy", ws.subjects.astype(str))
    meta = {
        "schema_version": CACHE_SCHEMA_VERSION,
        "name": split.name,
        "class_set": list(split.class_set),
        "normalized": split.normalized,
        "normalization_stats": split.normalization_stats.to_json(),
        "counts": split_counts(split),
    }
    if extra_meta:
        meta.update(extra_meta)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_split(directory) -> DatasetSplit:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise IngestionError(f"no prepared split at {d} (missing meta.json); run prepare-data first")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != CACHE_SCHEMA_VERSION:
        raise IngestionError(f"{d}: cache schema {meta.get('schema_version')} != {CACHE_SCHEMA_VERSION}")
    sides = {}
    for side in ("train", "test"):
        sides[side] = WindowSet(np.load(d / f"{side}_X.npy"), np.load(d / f"{side}_y.npy"),
                                np.load(d / f"{side}_subjects.npy"))
    return DatasetSplit(sides["train"], sides["test"], tuple(meta["class_set"]),
                        NormStats.from_json(meta["normalization_stats"]),
                        normalized=meta["normalized"], name=meta["name"])


def split_counts(split: DatasetSplit) -> dict:
    def side(ws: WindowSet):
        return {
            "n_windows": len(ws),
            "per_class": {str(c): int((ws.y == c).sum()) for c in split.class_set},
            "per_subject": {s: int((ws.subjects == s).sum()) for s in sorted(ws.subject_set)},
        }
    return {"train": side(split.train), "test": side(split.test)}
