"""Glue between experiment configs, the on-disk dataset cache and run directories."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import config as C
from .augment import apply_policy
from .dataio import (CsvSchema, DatasetSplit, SyntheticConfig, downsample, holdout_split,
                     load_generic_csv, load_pamap2, load_split, loso_splits, make_synthetic, normalize,
                     save_split, segment_windows)
from .distill import TrainedRun, predict_logits, select_eskd_teacher, train_kd, train_scratch
from .evaluation import EvalReport, evaluation_report
from .models import Checkpoint

log = logging.getLogger(__name__)

EVAL_SCHEMA_VERSION = 1
_TEST_AUG_EPOCH = 0


class UserError(Exception):
    """Problems the user can fix (missing inputs, bad arguments)."""


def load_recordings(cfg: dict):
    ds = cfg["dataset"]
    if ds["source"] == "synthetic":
        recs = make_synthetic(SyntheticConfig(**ds["synthetic"]))
    elif ds["source"] == "pamap2":
        root = Path(ds["root"])
        if not root.exists():
            raise UserError(f"PAMAP2 root {root} does not exist; expected subject101.dat ... subject109.dat "
                            f"(optionally under Protocol/)")
        recs = load_pamap2(root)
    else:
        schema = CsvSchema(**ds["csv_schema"])
        recs = load_generic_csv(ds["root"], schema)
    factor = int(ds.get("downsample") or 1)
    return [downsample(r, factor) for r in recs]


def make_splits(cfg: dict, recs) -> list[DatasetSplit]:
    ds = cfg["dataset"]
    kw = dict(pure_only=ds["pure_only"], class_set=ds["class_set"])
    if ds["split"] == "loso":
        return loso_splits(recs, ds["window_len"], ds["step"], **kw)
    return [holdout_split(recs, ds["window_len"], ds["step"], ds["test_subjects"], **kw)]


def data_dir(cfg: dict) -> Path:
    return Path(cfg["output_dir"]) / "data" / C.dataset_hash(cfg)[:16]


def prepare_data(cfg: dict) -> Path:
    """Window, split, normalize and cache the dataset; returns the cache directory."""
    recs = load_recordings(cfg)
    if not recs:
        raise UserError("dataset produced no recordings")
    splits = make_splits(cfg, recs)
    d = data_dir(cfg)
    dhash = C.dataset_hash(cfg)
    per_rec = [{"subject": r.subject_id, "n_samples": r.n_samples,
                "n_windows": len(segment_windows(r, cfg["dataset"]["window_len"], cfg["dataset"]["step"],
                                                 cfg["dataset"]["pure_only"]))} for r in recs]
    manifest = {
        "schema_version": 1,
        "dataset_hash": dhash,
        "dataset": C.scientific({"dataset": cfg["dataset"]})["dataset"],
        "n_channels": int(recs[0].n_channels),
        "recordings": per_rec,
        "splits": [],
    }
    for i, split in enumerate(splits):
        sd = save_split(normalize(split), d / f"fold_{i:02d}", {"dataset_hash": dhash, "fold": i})
        meta = json.loads((sd / "meta.json").read_text())
        manifest["splits"].append({"fold": i, "name": split.name, "path": sd.name, "counts": meta["counts"]})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_fold(cfg: dict, fold: int | None = None) -> DatasetSplit:
    d = data_dir(cfg)
    fold = cfg["fold"] if fold is None else fold
    if not (d / "manifest.json").is_file():
        raise UserError(f"no prepared dataset at {d}; run `kdaug prepare-data --config ...` first")
    path = d / f"fold_{int(fold):02d}"
    if not path.is_dir():
        raise UserError(f"fold {fold} not found in {d}")
    return load_split(path)


# ---------------------------------------------------------------------------
# runs


def run_config(cfg: dict, role: str, split: DatasetSplit, teacher: Checkpoint | None = None) -> dict:
    """Everything that determines a training run, as plain data."""
    spec_role = "teacher" if role == "teacher" else "student"
    aug_role = "teacher" if role == "teacher" else "student"
    spec = C.model_spec(cfg, spec_role, split.train.X.shape[1], split.n_classes)
    rc = {
        "role": role,
        "dataset_hash": C.dataset_hash(cfg),
        "fold": int(cfg["fold"]),
        "model": spec.to_dict(),
        "schedule": cfg["schedule"],
        "augmentation": C.policy(cfg, aug_role).to_dict(),
        "seed": int(cfg["seed"]),
        "ckpt_every": cfg["ckpt_every"],
    }
    if role == "student":
        rc["kd"] = dict(cfg["kd"])
        rc["teacher_digest"] = _digest(teacher.to_bytes())
    return rc


def _digest(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def run_dir_for(cfg: dict, rc: dict) -> Path:
    return Path(cfg["output_dir"]) / "runs" / f"{rc['role']}-{C.config_hash(rc)[:16]}"


def is_complete(run_dir: Path, chash: str) -> bool:
    s = run_dir / "summary.json"
    if not s.is_file():
        return False
    return json.loads(s.read_text()).get("config_hash") == chash


def resolve_teacher(path, mode: str) -> Checkpoint:
    """A checkpoint file, or a teacher run dir (best snapshot for eskd, final for full)."""
    p = Path(path)
    if p.is_file():
        return Checkpoint.load(p)
    if (p / "summary.json").is_file():
        run = TrainedRun.load(p)
        return select_eskd_teacher(run) if mode == "eskd" else run.final_checkpoint
    raise UserError(f"teacher checkpoint not found: {p}")


def train(cfg: dict, role: str, teacher_path=None, resume: bool = True) -> Path:
    if role not in ("teacher", "scratch", "student"):
        raise UserError(f"unknown role {role!r}")
    split = load_fold(cfg)
    teacher = None
    if role == "student":
        if teacher_path is None:
            raise UserError("role 'student' needs a teacher checkpoint (--teacher PATH)")
        teacher = resolve_teacher(teacher_path, cfg["kd"]["mode"])
    rc = run_config(cfg, role, split, teacher)
    chash = C.config_hash(rc)
    rd = run_dir_for(cfg, rc)
    existing = rd / "config.json"
    if existing.is_file() and C.config_hash(json.loads(existing.read_text())) != chash:
        raise UserError(f"run directory collision at {rd}")
    if resume and is_complete(rd, chash):
        log.info("run %s already complete; skipping", rd)
        return rd
    spec = C.model_spec(cfg, "teacher" if role == "teacher" else "student", split.train.X.shape[1], split.n_classes)
    sched = C.schedule(cfg)
    common = dict(run_dir=rd, config=rc, config_hash=chash, ckpt_every=cfg["ckpt_every"])
    if role == "student":
        train_kd(spec, teacher, split, sched, C.kd_config(cfg), C.policy(cfg, "student"), int(cfg["seed"]),
                 teacher_sees_clean=bool(cfg["kd"].get("teacher_sees_clean")), **common)
    else:
        train_scratch(spec, split, sched, C.policy(cfg, "teacher" if role == "teacher" else "student"),
                      int(cfg["seed"]), role=role, **common)
    return rd


def evaluate_run(run_dir, cfg: dict, test_policy=None) -> EvalReport:
    """Evaluate a run's best (eskd) or final (full) checkpoint on its fold's test view."""
    rd = Path(run_dir)
    if not (rd / "summary.json").is_file():
        raise UserError(f"{rd} is not a completed run directory")
    rc = json.loads((rd / "config.json").read_text())
    run = TrainedRun.load(rd)
    ckpt = run.best_checkpoint if run.mode == "eskd" else run.final_checkpoint
    fold_cfg = dict(cfg, fold=rc["fold"])
    if C.dataset_hash(cfg) != rc["dataset_hash"]:
        raise UserError(f"{rd} was trained on dataset {rc['dataset_hash'][:16]}, config describes "
                        f"{C.dataset_hash(cfg)[:16]}")
    split = load_fold(fold_cfg)
    policy = test_policy if test_policy is not None else C.policy(cfg, "test")
    X = apply_policy(split.test.X, policy, _TEST_AUG_EPOCH, int(rc["seed"]))
    logits = predict_logits(ckpt.to_model(), np.ascontiguousarray(X, dtype=np.float32))
    report = evaluation_report(logits.double(), split.encode(split.test.y), split.n_classes,
                               run_id=rd.name, checkpoint_epoch=ckpt.epoch, test_aug=policy.kind)
    out = report.to_dict()
    out["schema_version"] = EVAL_SCHEMA_VERSION
    out["config_hash"] = run.config_hash
    out["test_policy"] = policy.to_dict()
    (rd / eval_filename(policy)).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return report


def eval_filename(policy) -> str:
    return f"eval-{policy.kind}-{C.config_hash(policy.to_dict())[:8]}.json"
