import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdaug.dataio import (PAMAP2_ACTIVITIES, CsvSchema, IngestionError, Recording, SyntheticConfig, WindowSet,
                          compute_norm_stats, downsample, holdout_split, load_generic_csv, load_pamap2, load_split,
                          loso_splits, make_synthetic, normalize, pamap2_channel_columns, save_split, segment_windows,
                          window_count)


def brute_force_count(T, w, s):
    return sum(1 for start in range(0, T, s) if start + w <= T)


def rec(T, label=1, C=2, subject="a", rate=100.0):
    return Recording(subject, np.arange(C * T, dtype=np.float32).reshape(C, T), rate, label)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 600), st.integers(1, 600))
def test_window_count_matches_enumeration(T, w, s):
    assert window_count(T, w, s) == brute_force_count(T, w, s)
    assert len(segment_windows(rec(T), w, s)) == brute_force_count(T, w, s)


@pytest.mark.parametrize("T,w,s,n", [(408, 100, 22, 15), (1700, 500, 500, 3), (99, 100, 22, 0), (100, 100, 22, 1)])
def test_window_examples(T, w, s, n):
    assert len(segment_windows(rec(T), w, s)) == n


def test_overlap_fraction():
    assert (100 - 22) / 100 == pytest.approx(0.78)


def test_window_contents_and_starts():
    ws = segment_windows(rec(50, C=1), 10, 7)
    assert [int(w.data[0, 0]) for w in ws] == [0, 7, 14, 21, 28, 35]
    assert all(w.data.shape == (1, 10) for w in ws)


def test_pure_only_and_majority():
    labels = np.array([1] * 6 + [2] * 4)
    r = Recording("a", np.zeros((1, 10)), 10.0, labels)
    assert [w.label for w in segment_windows(r, 5, 5)] == [1]
    assert [w.label for w in segment_windows(r, 10, 10, pure_only=False)] == [1]
    tie = Recording("a", np.zeros((1, 4)), 10.0, np.array([3, 3, 2, 2]))
    assert segment_windows(tie, 4, 4, pure_only=False)[0].label == 2


def test_bad_window_arguments():
    with pytest.raises(ValueError):
        segment_windows(rec(10), 0, 1)
    with pytest.raises(ValueError):
        segment_windows(rec(10), 5, 0)


def test_downsample():
    r = rec(10, C=1)
    d = downsample(r, 3)
    assert d.n_samples == 4
    assert d.channels[0].tolist() == [0, 3, 6, 9]
    assert d.sample_rate_hz == pytest.approx(100 / 3)
    assert downsample(r, 1) is r
    with pytest.raises(ValueError):
        downsample(r, 0)
    with pytest.raises(ValueError):
        downsample(r, 1.5)


def test_recording_validation():
    with pytest.raises(ValueError):
        Recording("a", np.zeros(5), 10.0, 0)
    with pytest.raises(ValueError):
        Recording("a", np.zeros((1, 5)), 0.0, 0)
    with pytest.raises(ValueError):
        Recording("a", np.zeros((1, 5)), 10.0, np.zeros(4))


def _recs(n_subjects=9):
    return make_synthetic(SyntheticConfig(n_classes=3, n_subjects=n_subjects, T=32, windows_per_class=3))


def test_loso_partition():
    recs = _recs()
    splits = loso_splits(recs, 32, 16)
    assert len(splits) == 9
    total = sum(len(segment_windows(r, 32, 16)) for r in recs)
    seen = []
    for sp in splits:
        assert not (sp.train.subject_set & sp.test.subject_set)
        assert len(sp.test.subject_set) == 1
        assert len(sp.train) + len(sp.test) == total
        seen.extend(sp.test.subject_set)
    assert sorted(seen) == sorted({r.subject_id for r in recs})
    assert sum(len(sp.test) for sp in splits) == total


def test_loso_needs_two_subjects():
    with pytest.raises(ValueError):
        loso_splits(_recs(1), 32, 32)


def test_holdout_errors():
    recs = _recs(3)
    with pytest.raises(ValueError):
        holdout_split(recs, 32, 32, ["nobody"])
    with pytest.raises(ValueError):
        holdout_split(recs, 32, 32, ["s000", "s001", "s002"])


def test_overlapping_subjects_rejected():
    recs = _recs(3)
    sp = holdout_split(recs, 32, 32, ["s002"])
    with pytest.raises(ValueError):
        type(sp)(sp.train, sp.train, sp.class_set, sp.normalization_stats)


def test_normalization_uses_train_only():
    recs = _recs(3)
    sp = holdout_split(recs, 32, 32, ["s002"])
    shifted = WindowSet(sp.test.X + 100.0, sp.test.y, sp.test.subjects)
    sp2 = type(sp)(sp.train, shifted, sp.class_set, sp.normalization_stats)
    a, b = normalize(sp), normalize(sp2)
    np.testing.assert_array_equal(a.train.X, b.train.X)
    assert np.abs(a.train.X.astype(np.float64).mean(axis=(0, 2))).max() < 1e-6
    assert normalize(a) is a


def test_constant_channel_maps_to_zero():
    X = np.ones((4, 2, 8), np.float32)
    X[:, 1] = np.arange(8)
    ws = WindowSet(X, np.zeros(4), np.array(["a"] * 4))
    st = compute_norm_stats(ws)
    z = (X - st.mean[None, :, None]) / st.std[None, :, None]
    assert np.all(z[:, 0] == 0)


def test_class_filter_and_encode():
    recs = _recs(3)
    sp = holdout_split(recs, 32, 32, ["s002"], class_set=[0, 2])
    assert set(sp.train.y.tolist()) == {0, 2}
    assert sp.encode(np.array([2, 0])).tolist() == [1, 0]
    with pytest.raises(ValueError):
        sp.encode(np.array([1]))


def test_synthetic_determinism():
    a = make_synthetic(SyntheticConfig(seed=3))
    b = make_synthetic(SyntheticConfig(seed=3))
    c = make_synthetic(SyntheticConfig(seed=4))
    for x, y in zip(a, b):
        assert x.channels.tobytes() == y.channels.tobytes()
    assert any(not np.array_equal(x.channels, y.channels) for x, y in zip(a, c))


def test_synthetic_linear_probe():
    recs = make_synthetic(SyntheticConfig(n_classes=2, n_subjects=6, separation=3.0, T=128, windows_per_class=20))
    sp = normalize(holdout_split(recs, 128, 128, ["s004", "s005"]))
    # features invariant to where the bump sits: power spectrum per channel
    def feats(X):
        return np.abs(np.fft.rfft(X, axis=-1)).reshape(len(X), -1)

    Ftr, Fte = feats(sp.train.X), feats(sp.test.X)
    mu, sd = Ftr.mean(0), Ftr.std(0) + 1e-9
    A = np.c_[(Ftr - mu) / sd, np.ones(len(Ftr))]
    Y = np.eye(2)[sp.encode(sp.train.y)]
    W = np.linalg.lstsq(A, Y, rcond=None)[0]
    pred = (np.c_[(Fte - mu) / sd, np.ones(len(Fte))] @ W).argmax(1)
    assert (pred == sp.encode(sp.test.y)).mean() > 0.95


def test_split_cache_round_trip(tmp_path):
    sp = normalize(holdout_split(_recs(3), 32, 32, ["s002"]))
    d1 = save_split(sp, tmp_path / "a")
    d2 = save_split(sp, tmp_path / "b")
    for f in sorted(p.name for p in d1.iterdir()):
        assert (d1 / f).read_bytes() == (d2 / f).read_bytes()
    back = load_split(d1)
    np.testing.assert_array_equal(back.train.X, sp.train.X)
    assert back.class_set == sp.class_set and back.normalized
    meta = json.loads((d1 / "meta.json").read_text())
    assert meta["counts"]["train"]["n_windows"] == len(sp.train)
    with pytest.raises(IngestionError):
        load_split(tmp_path / "missing")


# --------------------------------------------------------------------------- csv


def write(path, text):
    path.write_text(text)
    return path


def test_csv_single_subject(tmp_path):
    p = write(tmp_path / "a.csv", "subject,label,x,y,z\n1,4,0.1,0.2,0.3\n1,4,0.4,0.5,0.6\n")
    recs = load_generic_csv(p, CsvSchema(["x", "y", "z"]))
    assert len(recs) == 1 and recs[0].n_channels == 3 and recs[0].n_samples == 2


def test_csv_interleaved_subjects_keep_file_order(tmp_path):
    p = write(tmp_path / "a.csv", "subject,label,x\nA,1,1\nB,1,10\nA,1,2\nB,1,20\nA,1,3\n")
    recs = load_generic_csv(p, CsvSchema(["x"]))
    assert [r.subject_id for r in recs] == ["A", "B"]
    assert recs[0].channels[0].tolist() == [1, 2, 3]
    assert recs[1].channels[0].tolist() == [10, 20]


def test_csv_empty_and_errors(tmp_path):
    assert load_generic_csv(write(tmp_path / "e.csv", ""), CsvSchema(["x"])) == []
    with pytest.raises(IngestionError, match="missing columns: y"):
        load_generic_csv(write(tmp_path / "m.csv", "subject,label,x\n1,1,1\n"), CsvSchema(["x", "y"]))
    with pytest.raises(IngestionError, match=":3"):
        load_generic_csv(write(tmp_path / "b.csv", "subject,label,x\n1,1,1\n1,1,abc\n"), CsvSchema(["x"]))


def test_csv_missing_values_filled(tmp_path):
    p = write(tmp_path / "a.csv", "subject,label,x\n1,1,1\n1,1,\n1,1,3\n")
    assert load_generic_csv(p, CsvSchema(["x"]))[0].channels[0].tolist() == [1, 2, 3]


# --------------------------------------------------------------------------- pamap2


def pamap2_rows(activities, rng):
    rows = []
    for i, a in enumerate(activities):
        r = rng.normal(size=54)
        r[0] = i / 100
        r[1] = a
        r[2] = np.nan if i % 10 else 80 + i % 7
        rows.append(r)
    return rows


def write_pamap2(root, subjects, n=300, seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        acts = [0] * 20 + [1] * n + [0] * 10 + [4] * n + [99] * 5
        lines = [" ".join("NaN" if np.isnan(v) else f"{v:.6f}" for v in r) for r in pamap2_rows(acts, rng)]
        (root / f"subject{s}.dat").write_text("\n".join(lines) + "\n")


def test_pamap2_load(tmp_path):
    write_pamap2(tmp_path / "Protocol", ["101", "102"])
    recs = load_pamap2(tmp_path, subjects=["101", "102"])
    assert [r.subject_id for r in recs] == ["101", "102"]
    r = recs[0]
    assert r.n_channels == 40 and r.n_samples == 600
    assert set(np.unique(r.labels).tolist()) == {1, 4}
    assert np.isfinite(r.channels).all()
    assert len(pamap2_channel_columns()) == 40
    assert len(PAMAP2_ACTIVITIES) == 12


def test_pamap2_missing_file(tmp_path):
    write_pamap2(tmp_path, ["101"])
    with pytest.raises(IngestionError, match="subject 102"):
        load_pamap2(tmp_path, subjects=["101", "102"])


def test_pamap2_malformed_line(tmp_path):
    write_pamap2(tmp_path, ["101"], n=5)
    p = tmp_path / "subject101.dat"
    lines = p.read_text().splitlines()
    lines[3] = " ".join(lines[3].split()[:50])
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestionError, match=r"subject101.dat:4"):
        load_pamap2(tmp_path, subjects=["101"])


def test_pamap2_absent_activity_gives_no_windows(tmp_path):
    write_pamap2(tmp_path, ["103"], n=408)
    r = load_pamap2(tmp_path, subjects=["103"])[0]
    ws = segment_windows(r, 100, 22)
    assert not [w for w in ws if w.label == 5]  # no running rows
    assert sum(w.label == 1 for w in ws) == 15
