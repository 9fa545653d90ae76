"""Distillation loss, learning-rate schedule and the scratch / KD training loops."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentationPolicy, apply_policy
from .dataio import DatasetSplit
from .models import Checkpoint, Classifier, ModelSpec, build

log = logging.getLogger(__name__)

RUN_SCHEMA_VERSION = 1
_SHUFFLE_TAG = 0x5348554646  # keeps the shuffle stream apart from per-sample augmentation streams


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class KDConfig:
    tau: float = 4.0
    lam: float = 0.7
    mode: str = "eskd"  # "full" | "eskd"

    def __post_init__(self):
        if not self.tau >= 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if self.mode not in ("full", "eskd"):
            raise ValueError(f"mode must be 'full' or 'eskd', got {self.mode!r}")


@dataclass(frozen=True)
class TrainingSchedule:
    total_epochs: int
    initial_lr: float
    first_drop_epoch: int = 10
    first_drop_factor: float = 0.5
    periodic_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be >= 0")
        if not (0 < self.first_drop_factor <= 1 and 0 < self.periodic_factor <= 1):
            raise ValueError("drop factors must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def student_epochs(self, mode: str) -> int:
        return math.ceil(0.75 * self.total_epochs) if mode == "eskd" else self.total_epochs


GENEACTIV_SCHEDULE = TrainingSchedule(200, 0.1, first_drop_factor=0.5, batch_size=64)
PAMAP2_SCHEDULE = TrainingSchedule(180, 0.05, first_drop_factor=0.2, batch_size=32)


def lr_at(epoch: int, sched: TrainingSchedule) -> float:
    """Learning rate for a 1-based epoch.

    One ``first_drop_factor`` multiplication once past ``first_drop_epoch``,
    and one ``periodic_factor`` multiplication per completed block of
    ``floor(total_epochs / 3)`` epochs.
    """
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    lr = sched.initial_lr
    if epoch > sched.first_drop_epoch:
        lr *= sched.first_drop_factor
    period = sched.total_epochs // 3
    if period >= 1:
        lr *= sched.periodic_factor ** ((epoch - 1) // period)
    return lr


# ---------------------------------------------------------------------------
# losses


def softmax_with_temperature(logits, tau: float = 1.0):
    """Stable softmax of ``logits / tau`` along the last axis.

    Accepts a tensor (returns a tensor) or array-like (returns float64 numpy).
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if torch.is_tensor(logits):
        if not torch.isfinite(logits).all():
            raise ValueError("non-finite logits")
        return F.softmax(logits / tau, dim=-1)
    z = np.asarray(logits, dtype=np.float64) / tau
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kd_loss_terms(student_logits: torch.Tensor, teacher_logits: torch.Tensor, labels: torch.Tensor,
                  cfg: KDConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return ``(total, ce, kd)`` batch means, with ``kd = tau^2 * KL(f_t || f_s)``.

    The teacher side is detached, so gradients reach the student only.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"student {tuple(student_logits.shape)} and teacher "
                         f"{tuple(teacher_logits.shape)} logits differ in shape")
    if student_logits.ndim == 1:
        student_logits, teacher_logits = student_logits[None], teacher_logits[None]
        labels = torch.as_tensor(labels).reshape(1)
    tau = float(cfg.tau)
    ce = F.cross_entropy(student_logits, labels)
    log_fs = F.log_softmax(student_logits / tau, dim=-1)
    log_ft = F.log_softmax(teacher_logits.detach() / tau, dim=-1)
    kl = (log_ft.exp() * (log_ft - log_fs)).sum(dim=-1).mean()
    kd = tau * tau * kl
    total = (1.0 - cfg.lam) * ce + cfg.lam * kd
    return total, ce, kd


def kd_loss(student_logits, teacher_logits, labels, cfg: KDConfig) -> torch.Tensor:
    """Total distillation loss ``(1 - lam) * CE + lam * tau^2 * KL(f_t || f_s)``."""
    return kd_loss_terms(student_logits, teacher_logits, labels, cfg)[0]


# ---------------------------------------------------------------------------
# runs


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_ce: float
    train_kd: float | None
    train_loss: float
    train_acc: float
    test_acc: float
    test_ce: float


@dataclass
class TrainedRun:
    spec: ModelSpec
    role: str
    seed: int
    mode: str = "full"
    config_hash: str = ""
    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: dict[int, Checkpoint] = field(default_factory=dict)
    best_epoch: int | None = None
    run_dir: Path | None = None

    @property
    def best_checkpoint(self) -> Checkpoint:
        return self.checkpoints[self.best_epoch]

    @property
    def final_checkpoint(self) -> Checkpoint:
        return self.checkpoints[max(self.checkpoints)]

    def trail(self, key: str = "test_acc") -> list:
        return [getattr(r, key) for r in self.records]

    def summary(self) -> dict:
        best = max(self.records, key=lambda r: (r.test_acc, -r.epoch)) if self.records else None
        return {
            "schema_version": RUN_SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "role": self.role,
            "mode": self.mode,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "epochs": len(self.records),
            "final_test_acc": self.records[-1].test_acc if self.records else None,
            "best_test_acc": best.test_acc if best else None,
            "best_epoch": self.best_epoch,
            "checkpoint_epochs": sorted(self.checkpoints),
        }

    @classmethod
    def load(cls, run_dir, load_checkpoints: bool = True) -> "TrainedRun":
        d = Path(run_dir)
        summary = json.loads((d / "summary.json").read_text())
        records = [EpochRecord(**json.loads(line)) for line in (d / "metrics.jsonl").read_text().splitlines() if line]
        run = cls(ModelSpec.from_dict(summary["spec"]), summary["role"], summary["seed"], summary["mode"],
                  summary["config_hash"], records, best_epoch=summary["best_epoch"], run_dir=d)
        if load_checkpoints:
            for e in summary["checkpoint_epochs"]:
                run.checkpoints[e] = Checkpoint.load(d / "checkpoints" / f"epoch_{e:04d}.ckpt")
        return run


class _RunWriter:
    def __init__(self, run_dir, config: dict | None):
        self.dir = Path(run_dir)
        (self.dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        if config is not None:
            (self.dir / "config.json").write_text(canonical_json(config) + "\n")
        self.metrics = open(self.dir / "metrics.jsonl", "w")

    def record(self, rec: EpochRecord):
        self.metrics.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        self.metrics.flush()

    def checkpoint(self, ckpt: Checkpoint):
        ckpt.save(self.dir / "checkpoints" / f"epoch_{ckpt.epoch:04d}.ckpt")

    def prune(self, keep: set[int]):
        for p in (self.dir / "checkpoints").glob("epoch_*.ckpt"):
            if int(p.stem.split("_")[1]) not in keep:
                p.unlink()

    def finish(self, run: TrainedRun):
        self.metrics.close()
        best = run.best_checkpoint
        best.save(self.dir / "checkpoints" / "best.ckpt")
        tmp = self.dir / "summary.json.tmp"
        tmp.write_text(json.dumps(run.summary(), indent=2, sort_keys=True) + "\n")
        tmp.replace(self.dir / "summary.json")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def select_eskd_teacher(run: TrainedRun, rule: str = "best", epoch: int | None = None) -> Checkpoint:
    """Pick the early-stopped teacher from a run's checkpoints.

    ``rule="best"``: highest recorded test accuracy, earliest epoch on ties.
    ``rule="epoch"``: the checkpoint saved at ``epoch``.
    """
    if not run.checkpoints:
        raise ValueError("run has no checkpoints")
    if rule == "epoch":
        if epoch not in run.checkpoints:
            raise ValueError(f"no checkpoint at epoch {epoch}; have {sorted(run.checkpoints)}")
        return run.checkpoints[epoch]
    if rule != "best":
        raise ValueError(f"unknown selection rule {rule!r}")
    acc = {r.epoch: r.test_acc for r in run.records}

    def key(e):
        a = run.checkpoints[e].metrics.get("test_acc", acc.get(e, -math.inf))
        return (a, -e)

    return run.checkpoints[max(run.checkpoints, key=key)]


# ---------------------------------------------------------------------------
# training


def _to_tensors(split: DatasetSplit):
    Xtr = np.ascontiguousarray(split.train.X, dtype=np.float32)
    ytr = torch.from_numpy(split.encode(split.train.y))
    Xte = torch.from_numpy(np.ascontiguousarray(split.test.X, dtype=np.float32))
    yte = torch.from_numpy(split.encode(split.test.y))
    return Xtr, ytr, Xte, yte


@torch.no_grad()
def predict_logits(model: torch.nn.Module, X, batch_size: int = 256) -> torch.Tensor:
    was = model.training
    model.eval()
    X = torch.as_tensor(X)
    out = [model(X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
    model.train(was)
    if not out:
        return torch.zeros((0, model.spec.n_classes))
    return torch.cat(out)


def _evaluate(model, X, y):
    if len(y) == 0:
        return float("nan"), float("nan")
    logits = predict_logits(model, X)
    acc = 100.0 * (logits.argmax(dim=1) == y).double().mean().item()
    ce = F.cross_entropy(logits, y).item()
    return acc, ce


def _fit(model: Classifier, split: DatasetSplit, sched: TrainingSchedule, policy: AugmentationPolicy,
         seed: int, epochs: int, role: str, mode: str, teacher: Classifier | None, kd_cfg: KDConfig | None,
         teacher_sees_clean: bool, run_dir, config: dict | None, config_hash: str,
         ckpt_every: int | None) -> TrainedRun:
    if split.train.X.shape[1] != model.spec.in_channels:
        raise ValueError(f"split has {split.train.X.shape[1]} channels, model expects {model.spec.in_channels}")
    if split.n_classes != model.spec.n_classes:
        raise ValueError(f"split has {split.n_classes} classes, model expects {model.spec.n_classes}")
    Xtr, ytr, Xte, yte = _to_tensors(split)
    n = len(ytr)
    if n == 0:
        raise ValueError("empty training set")
    opt = torch.optim.SGD(model.parameters(), lr=sched.initial_lr, momentum=sched.momentum,
                          weight_decay=sched.weight_decay)
    if ckpt_every is None:
        ckpt_every = max(1, epochs // 20)
    run = TrainedRun(model.spec, role, seed, mode, config_hash)
    writer = _RunWriter(run_dir, config) if run_dir is not None else None
    best_acc = -math.inf
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        lr = lr_at(epoch, sched)
        for g in opt.param_groups:
            g["lr"] = lr
        order = np.random.default_rng([seed, epoch, _SHUFFLE_TAG]).permutation(n)
        model.train()
        sums = np.zeros(4)  # ce, kd, loss, correct
        for b, lo in enumerate(range(0, n, sched.batch_size)):
            idx = order[lo:lo + sched.batch_size]
            xb_np = apply_policy(Xtr[idx], policy, epoch, seed, indices=idx)
            xb = torch.from_numpy(np.ascontiguousarray(xb_np, dtype=np.float32))
            yb = ytr[idx]
            logits = model(xb)
            if teacher is None:
                loss = ce = F.cross_entropy(logits, yb)
                kd = None
            else:
                with torch.no_grad():
                    t_in = torch.from_numpy(Xtr[idx]) if teacher_sees_clean else xb
                    t_logits = teacher(t_in)
                loss, ce, kd = kd_loss_terms(logits, t_logits, yb, kd_cfg)
            if not torch.isfinite(loss):
                if writer:
                    writer.metrics.close()
                raise TrainingDiverged(f"{role}: non-finite loss at epoch {epoch}, batch {b} (lr={lr:g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            k = len(idx)
            sums += [ce.item() * k, (kd.item() * k if kd is not None else 0.0), loss.item() * k,
                     (logits.detach().argmax(1) == yb).sum().item()]
        test_acc, test_ce = _evaluate(model, Xte, yte)
        rec = EpochRecord(epoch, lr, float(sums[0] / n), (float(sums[1] / n) if teacher is not None else None),
                          float(sums[2] / n), float(100.0 * sums[3] / n), test_acc, test_ce)
        run.records.append(rec)
        if writer:
            writer.record(rec)
        metrics = {"train_loss": rec.train_loss, "test_acc": rec.test_acc}
        improved = test_acc > best_acc or run.best_epoch is None
        if improved or epoch % ckpt_every == 0 or epoch == epochs:
            ckpt = Checkpoint.from_model(model, epoch, metrics, config_hash)
            run.checkpoints[epoch] = ckpt
            if writer:
                writer.checkpoint(ckpt)
        if improved:
            # keep only the periodic snapshots, the final one and the new best
            stale = run.best_epoch
            best_acc, run.best_epoch = test_acc, epoch
            if stale is not None and stale % ckpt_every != 0:
                run.checkpoints.pop(stale, None)
                if writer:
                    writer.prune(set(run.checkpoints))
        log.debug("%s epoch %d lr=%.4g loss=%.4f test_acc=%.2f (%.1fs)", role, epoch, lr, rec.train_loss, test_acc,
                  time.perf_counter() - t0)
    if writer:
        writer.finish(run)
        run.run_dir = writer.dir
    return run


def train_scratch(spec: ModelSpec, split: DatasetSplit, sched: TrainingSchedule,
                  policy: AugmentationPolicy | None = None, seed: int = 0, *, epochs: int | None = None,
                  role: str = "scratch", run_dir=None, config: dict | None = None, config_hash: str = "",
                  ckpt_every: int | None = None) -> TrainedRun:
    """Train ``spec`` with plain cross-entropy; augmentation touches train batches only."""
    policy = policy or AugmentationPolicy()
    torch.manual_seed(seed)
    model = build(spec)
    return _fit(model, split, sched, policy, seed, epochs or sched.total_epochs, role, "full", None, None,
                False, run_dir, config, config_hash, ckpt_every)


def train_kd(student_spec: ModelSpec, teacher_ckpt: Checkpoint, split: DatasetSplit, sched: TrainingSchedule,
             kd_cfg: KDConfig, policy: AugmentationPolicy | None = None, seed: int = 0, *,
             teacher_sees_clean: bool = False, run_dir=None, config: dict | None = None,
             config_hash: str = "", ckpt_every: int | None = None) -> TrainedRun:
    """Distil ``teacher_ckpt`` into a fresh ``student_spec`` network.

    Runs ``sched.total_epochs`` epochs in ``full`` mode and
    ``ceil(0.75 * total_epochs)`` in ``eskd`` mode; the learning-rate schedule
    is the same in both.
    """
    policy = policy or AugmentationPolicy()
    if teacher_ckpt.spec.n_classes != student_spec.n_classes:
        raise ValueError(f"teacher predicts {teacher_ckpt.spec.n_classes} classes, "
                         f"student {student_spec.n_classes}")
    torch.manual_seed(seed)
    student = build(student_spec)
    with torch.random.fork_rng():
        teacher = teacher_ckpt.to_model()
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    epochs = sched.student_epochs(kd_cfg.mode)
    return _fit(student, split, sched, policy, seed, epochs, "student", kd_cfg.mode, teacher, kd_cfg,
                teacher_sees_clean, run_dir, config, config_hash, ckpt_every)
