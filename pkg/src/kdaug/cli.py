"""Command-line entry point: ``kdaug <verb> ...``.

Verbs: prepare-data, train, sweep, evaluate, report, benchmark.
Exit codes: 0 success, 1 user error, 2 internal error.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import subprocess
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import numpy as np
import yaml

from . import config as C
from . import pipeline as P
from .augment import AugmentationPolicy
from .dataio import IngestionError
from .distill import RUN_SCHEMA_VERSION
from .evaluation import timing_benchmark, welch_ttest
from .models import Checkpoint, count_parameters
from .report import ReportTable, emit_report

log = logging.getLogger("kdaug")

GRID_SCHEMA_VERSION = 1
SWEEP_AXES = ("models.teacher", "kd.tau", "kd.lam", "augmentation.teacher", "augmentation.student",
              "augmentation.test", "seed", "fold")
_USER_ERRORS = (P.UserError, C.ConfigError, IngestionError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config helpers


def _load_cfg(args) -> dict:
    cfg = C.load(args.config)
    if getattr(args, "out", None):
        cfg["output_dir"] = str(args.out)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    if getattr(args, "fold", None) is not None:
        cfg["fold"] = int(args.fold)
    return cfg


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# simple verbs


def cmd_prepare_data(args) -> int:
    cfg = _load_cfg(args)
    d = P.prepare_data(cfg)
    manifest = json.loads((d / "manifest.json").read_text())
    print(f"prepared {len(manifest['splits'])} split(s) in {d}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    rd = P.train(cfg, args.role, args.teacher, resume=not args.no_resume)
    if args.evaluate:
        rep = P.evaluate_run(rd, cfg)
        print(f"{rd.name}: accuracy {rep.accuracy:.2f} ece {rep.ece:.2f}")
    print(rd)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    test_policy = None
    if args.test_aug:
        base = dict(cfg["augmentation"]["test"]) if isinstance(cfg["augmentation"]["test"], dict) else {}
        base["kind"] = args.test_aug
        test_policy = AugmentationPolicy.from_dict(base)
    for rd in args.runs:
        rep = P.evaluate_run(rd, cfg, test_policy)
        print(f"{Path(rd).name}\ttest_aug={rep.test_aug}\tepoch={rep.checkpoint_epoch}\t"
              f"accuracy={rep.accuracy:.2f}\tece={rep.ece:.2f}")
    return 0


def cmd_benchmark(args) -> int:
    rows = []
    rng = np.random.default_rng(0)
    for path in args.checkpoints:
        p = Path(path)
        if not p.is_file():
            raise P.UserError(f"checkpoint not found: {p}")
        ckpt = Checkpoint.load(p)
        model = ckpt.to_model()
        X = rng.standard_normal((args.samples, ckpt.spec.in_channels, args.window_len)).astype(np.float32)
        res = timing_benchmark(model, X, device=args.device, warmup=args.warmup)
        res.update(checkpoint=str(p), model=ckpt.spec.name, params=count_parameters(model),
                   config_hash=ckpt.config_hash)
        rows.append(res)
    lines = ["| Model | Params | Samples | Total (s) | Avg (ms) | Device |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['model']} | {r['params']:,} | {r['n_samples']} | {r['total_s']:.3f} | "
                     f"{r['avg_ms']:.3f} | {r['device_label']} |")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    print("note: timings assume the machine ran nothing else during the benchmark")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "timing.md").write_text(table, encoding="utf-8")
        (out / "timing.json").write_text(json.dumps({"schema_version": 1, "rows": rows}, indent=2,
                                                    sort_keys=True) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    d = cfg
    for k in keys[:-1]:
        d = d[k]
    if keys[0] == "augmentation" and isinstance(value, str):
        base = d[keys[-1]] if isinstance(d[keys[-1]], dict) else {}
        value = dict(base, kind=value)
    d[keys[-1]] = copy.deepcopy(value)


def _axis_label(axis: str, value) -> str:
    if axis == "models.teacher":
        v = dict(value)
        if v.get("family") == "wrn":
            return f"WRN{v.get('depth', 16)}-{v['width']}"
        return f"ResNet18({v['width']})"
    if axis.startswith("augmentation."):
        return value if isinstance(value, str) else value.get("kind", "none")
    return str(value)


def expand_grid(cfg: dict) -> list[tuple[dict, dict]]:
    """Cartesian product of ``sweep.axes``; returns ``(axis_labels, cell_config)`` pairs."""
    sweep = cfg.get("sweep") or {}
    axes = sweep.get("axes") or {}
    bad = set(axes) - set(SWEEP_AXES)
    if bad:
        raise C.ConfigError(f"unsupported sweep axes {sorted(bad)}; allowed: {list(SWEEP_AXES)}")
    names = sorted(axes)
    for n in names:
        if not isinstance(axes[n], list) or not axes[n]:
            raise C.ConfigError(f"sweep axis {n!r} must be a non-empty list")
    base = {k: v for k, v in cfg.items() if k != "sweep"}
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        c = copy.deepcopy(base)
        for n, v in zip(names, combo):
            _set_path(c, n, v)
        C.validate(c)
        cells.append(({n: _axis_label(n, v) for n, v in zip(names, combo)}, c))
    return cells


def _run_subprocess(argv: list[str], log_path: Path) -> tuple[int, str]:
    with open(log_path, "w") as fh:
        proc = subprocess.run([sys.executable, "-m", "kdaug", *argv], stdout=fh, stderr=subprocess.STDOUT)
    return proc.returncode, log_path.read_text()[-2000:]


class _Sweep:
    def __init__(self, cfg: dict, out: Path, workers: int, resume: bool):
        self.cfg, self.out, self.workers, self.resume = cfg, out, workers, resume
        self.cells_dir = out / "sweep"
        self.cells_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = out / "grid.json"
        self.runs: dict[str, dict] = {}
        self.cells: list[dict] = []
        self._splits = {}

    def _write_cell_config(self, cell_cfg: dict) -> Path:
        h = C.config_hash(C.scientific(cell_cfg))[:16]
        p = self.cells_dir / f"cell-{h}.yaml"
        if not p.is_file():
            _write_atomic(p, yaml.safe_dump(cell_cfg, sort_keys=True))
        return p

    def _split(self, cell_cfg):
        key = (C.dataset_hash(cell_cfg), cell_cfg["fold"])
        if key not in self._splits:
            self._splits[key] = P.load_fold(cell_cfg)
        return self._splits[key]

    def _register(self, cell_cfg: dict, role: str, teacher: Checkpoint | None = None,
                  teacher_dir: Path | None = None) -> str:
        rc = P.run_config(cell_cfg, role, self._split(cell_cfg), teacher)
        chash = C.config_hash(rc)
        rd = P.run_dir_for(cell_cfg, rc)
        rid = rd.name
        prev = self.runs.get(rid)
        if prev is not None and prev["config_hash"] != chash:
            raise P.UserError(f"output directory collision: {rd} claimed by two different run configs")
        if prev is None:
            self.runs[rid] = {"role": role, "run_dir": str(rd.relative_to(self.out)), "config_hash": chash,
                              "status": "pending", "cell_config": str(self._write_cell_config(cell_cfg)
                                                                     .relative_to(self.out)),
                              "teacher_dir": str(teacher_dir) if teacher_dir else None}
            if (rd / "config.json").is_file():
                if C.config_hash(json.loads((rd / "config.json").read_text())) != chash:
                    raise P.UserError(f"output directory collision at {rd}")
            if P.is_complete(rd, chash):
                self.runs[rid]["status"] = "done" if self.resume else "pending"
        return rid

    def save(self) -> None:
        manifest = {
            "schema_version": GRID_SCHEMA_VERSION,
            "run_schema_version": RUN_SCHEMA_VERSION,
            "eval_schema_version": P.EVAL_SCHEMA_VERSION,
            "grid_hash": C.config_hash(C.scientific(self.cfg)),
            "axes": (self.cfg.get("sweep") or {}).get("axes", {}),
            "runs": self.runs,
            "cells": self.cells,
        }
        _write_atomic(self.manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def _train_phase(self, rids: list[str]) -> None:
        todo = [r for r in rids if self.runs[r]["status"] != "done"]
        if not todo:
            return
        logs = self.out / "sweep" / "logs"
        logs.mkdir(parents=True, exist_ok=True)

        def job(rid):
            r = self.runs[rid]
            argv = ["train", "--config", str(self.out / r["cell_config"]), "--role", r["role"],
                    "--out", str(self.out)]
            if r["teacher_dir"]:
                argv += ["--teacher", r["teacher_dir"]]
            return _run_subprocess(argv, logs / f"{rid}.log")

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futs = {pool.submit(job, rid): rid for rid in todo}
            for f in as_completed(futs):
                rid = futs[f]
                code, tail = f.result()
                if code == 0:
                    self.runs[rid]["status"] = "done"
                    self.runs[rid].pop("error", None)
                else:
                    self.runs[rid]["status"] = "failed"
                    self.runs[rid]["error"] = f"exit {code}: {tail.strip().splitlines()[-1] if tail.strip() else ''}"
                    log.error("run %s failed (exit %d); see %s", rid, code, logs / f"{rid}.log")
                self.save()

    def _eval_phase(self) -> None:
        logs = self.out / "sweep" / "logs"
        jobs = {}
        for cell in self.cells:
            cfg_path = self.out / cell["cell_config"]
            policy = AugmentationPolicy.from_dict(C.load(cfg_path)["augmentation"]["test"])
            fname = P.eval_filename(policy)
            cell["eval_file"] = fname
            for key in ("teacher_run", "student_run", "scratch_run"):
                rid = cell.get(key)
                if not rid or self.runs[rid]["status"] != "done":
                    continue
                target = self.out / self.runs[rid]["run_dir"] / fname
                if self.resume and target.is_file():
                    continue
                jobs.setdefault((str(cfg_path), rid), target)

        def job(key):
            cfg_path, rid = key
            argv = ["evaluate", "--config", cfg_path, "--out", str(self.out), str(self.out / self.runs[rid]["run_dir"])]
            return _run_subprocess(argv, logs / f"eval-{rid}-{Path(cfg_path).stem}.log")

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futs = {pool.submit(job, k): k for k in jobs}
            for f in as_completed(futs):
                code, tail = f.result()
                if code != 0:
                    rid = futs[f][1]
                    self.runs[rid]["eval_error"] = f"exit {code}"
                    log.error("evaluation of %s failed (exit %d)", rid, code)
        for cell in self.cells:
            needed = [cell.get(k) for k in ("teacher_run", "student_run", "scratch_run") if cell.get(k)]
            ok = all(self.runs[r]["status"] == "done" and (self.out / self.runs[r]["run_dir"] / cell["eval_file"])
                     .is_file() for r in needed)
            cell["status"] = "done" if ok else "failed"
        self.save()

    def run(self) -> int:
        expanded = expand_grid(self.cfg)
        include_scratch = bool((self.cfg.get("sweep") or {}).get("scratch", True))
        for _, c in expanded:
            if not (P.data_dir(c) / "manifest.json").is_file():
                P.prepare_data(c)
        # phase 1: teachers and scratch baselines
        for labels, c in expanded:
            cell = {"axes": labels, "cell_config": str(self._write_cell_config(c).relative_to(self.out)),
                    "teacher_aug": AugmentationPolicy.from_dict(c["augmentation"]["teacher"]).kind,
                    "student_aug": AugmentationPolicy.from_dict(c["augmentation"]["student"]).kind,
                    "teacher_run": self._register(c, "teacher")}
            if include_scratch:
                cell["scratch_run"] = self._register(c, "scratch")
            cell["cell_id"] = C.config_hash(labels)[:16]
            self.cells.append(cell)
        self.save()
        self._train_phase(sorted({c["teacher_run"] for c in self.cells} | {c.get("scratch_run") for c in self.cells
                                                                              if c.get("scratch_run")}))
        # phase 2: students distilled from the teacher of their cell
        students = []
        for cell, (_, c) in zip(self.cells, expanded):
            t = self.runs[cell["teacher_run"]]
            if t["status"] != "done":
                cell["student_run"] = None
                continue
            tdir = self.out / t["run_dir"]
            teacher = P.resolve_teacher(tdir, c["kd"]["mode"])
            cell["student_run"] = self._register(c, "student", teacher, tdir)
            students.append(cell["student_run"])
        self.save()
        self._train_phase(sorted(set(students)))
        # phase 3: evaluation on each cell's test view
        self._eval_phase()
        failed = [c for c in self.cells if c["status"] != "done"]
        print(f"sweep: {len(self.cells) - len(failed)}/{len(self.cells)} cells complete; manifest {self.manifest_path}")
        return 2 if failed else 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.get("sweep"):
        raise P.UserError(f"{args.config} has no 'sweep' section")
    out = Path(cfg["output_dir"]).resolve()
    cfg["output_dir"] = str(out)
    manifest = out / "grid.json"
    if manifest.is_file() and not args.resume:
        old = json.loads(manifest.read_text())
        if old.get("grid_hash") != C.config_hash(C.scientific(cfg)):
            raise P.UserError(f"{manifest} belongs to a different grid; use another --out")
    workers = args.workers or _default_workers()
    return _Sweep(cfg, out, workers, resume=True).run()


# ---------------------------------------------------------------------------
# report


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise P.UserError(f"missing artifact {path}") from None


def build_tables(manifest: dict, root: Path, baseline: str | None = None) -> tuple[list[ReportTable], dict]:
    """Group grid cells into accuracy / ECE tables (rows: student view, columns: teacher view)."""
    for key, want in (("schema_version", GRID_SCHEMA_VERSION), ("run_schema_version", RUN_SCHEMA_VERSION),
                      ("eval_schema_version", P.EVAL_SCHEMA_VERSION)):
        if manifest.get(key) != want:
            raise P.UserError(f"grid manifest {key}={manifest.get(key)!r}, this version reads {want}")
    runs = manifest["runs"]

    def run_eval(rid, fname):
        if not rid or runs[rid]["status"] != "done":
            return None
        rd = root / runs[rid]["run_dir"]
        p = rd / fname
        if not p.is_file():
            return None
        ev = _read_json(p)
        summ = _read_json(rd / "summary.json")
        if ev.get("schema_version") != P.EVAL_SCHEMA_VERSION or summ.get("schema_version") != RUN_SCHEMA_VERSION:
            raise P.UserError(f"{rd}: artifacts use a different schema version; refusing to mix")
        if ev.get("config_hash") != runs[rid]["config_hash"]:
            raise P.UserError(f"{p}: config hash does not match the grid manifest")
        return ev, summ, rd

    groups: dict[tuple, dict] = {}
    for cell in manifest["cells"]:
        ax = cell["axes"]
        key = (ax.get("models.teacher", ""), ax.get("kd.tau", ""), ax.get("kd.lam", ""),
               ax.get("augmentation.test", ""))
        g = groups.setdefault(key, {"acc": {}, "ece": {}, "teacher": {}, "curves": {}, "rows": [], "cols": []})
        col = f"teacher {cell.get('teacher_aug', ax.get('augmentation.teacher', 'none'))}"
        if col not in g["cols"]:
            g["cols"].append(col)
        fname = cell.get("eval_file", "")
        t = run_eval(cell.get("teacher_run"), fname)
        if t:
            summ = t[1]
            g["teacher"].setdefault(col, {})[cell["teacher_run"]] = summ["best_test_acc"] if summ["mode"] == "eskd" \
                else summ["final_test_acc"]
        for role, prefix in (("student_run", "KD"), ("scratch_run", "scratch")):
            rid = cell.get(role)
            row = f"{prefix} {cell.get('student_aug', ax.get('augmentation.student', 'none'))}"
            if row not in g["rows"]:
                g["rows"].append(row)
            got = run_eval(rid, fname)
            if not got:
                continue
            ev, _, rd = got
            seen = g["acc"].setdefault((row, col), {})
            if rid in seen:
                continue
            seen[rid] = ev["accuracy"]
            g["ece"].setdefault((row, col), {})[rid] = ev["ece"]
            trail = [json.loads(line)["test_acc"] for line in (rd / "metrics.jsonl").read_text().splitlines() if line]
            g["curves"].setdefault(row, {})[rid] = trail

    tables, pvals = [], {}
    for i, (key, g) in enumerate(sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0])))):
        tlabel, tau, lam, test_aug = key
        suffix = ", ".join(s for s in (f"teacher {tlabel}" if tlabel else "", f"tau {tau}" if tau != "" else "",
                                       f"lambda {lam}" if lam != "" else "",
                                       f"test view {test_aug}" if test_aug else "") if s)
        rows = sorted(g["rows"], key=lambda r: (not r.startswith("scratch"), r))
        cols = g["cols"]
        acc = {k: [v[r] for r in sorted(v)] for k, v in g["acc"].items()}
        eces = {k: [v[r] for r in sorted(v)] for k, v in g["ece"].items()}
        notes = {c: float(np.mean(list(v.values()))) for c, v in g["teacher"].items() if v}
        curves = {r: [v[k] for k in sorted(v)] for r, v in g["curves"].items()}
        name = f"g{i:02d}"
        tables.append(ReportTable(f"{name}_accuracy", f"Accuracy (%), {suffix}" if suffix else "Accuracy (%)",
                                  rows, cols, acc, col_notes=notes, curves=curves))
        tables.append(ReportTable(f"{name}_ece", f"ECE (%), {suffix}" if suffix else "ECE (%)", rows, cols, eces))
        if baseline:
            if baseline not in rows:
                raise P.UserError(f"baseline row {baseline!r} not in table rows {rows}")
            cells = {}
            for r in rows:
                for c in cols:
                    a, b = acc.get((r, c)), acc.get((baseline, c))
                    if r != baseline and a and b and len(a) > 1 and len(b) > 1:
                        try:
                            cells[(r, c)] = [welch_ttest(a, b)[1]]
                        except ValueError:
                            pass
            title = f"Welch t-test p-value vs {baseline}" + (f", {suffix}" if suffix else "")
            tables.append(ReportTable(f"{name}_pvalues", title, rows, cols, cells, cell_format="p"))
            pvals[name] = {f"{r}|{c}": v[0] for (r, c), v in cells.items()}
    extra = {"grid_hash": manifest.get("grid_hash"),
             "conventions": {"ece_bins": 15, "ece_bin_edges": "equal width, right closed",
                             "significance": "two-sided Welch t-test"},
             "p_values": pvals}
    return tables, extra


def cmd_report(args) -> int:
    path = Path(args.grid)
    if path.is_dir():
        path = path / "grid.json"
    manifest = _read_json(path)
    tables, extra = build_tables(manifest, path.parent, args.baseline)
    out = Path(args.out) if args.out else path.parent / "report"
    files = emit_report(tables, out, extra)
    print(f"wrote {len(files)} files to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kdaug", description="Knowledge distillation with time-series augmentation for HAR.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment YAML")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--fold", type=int)

    sp = sub.add_parser("prepare-data", help="window, split, normalize and cache a dataset")
    common(sp)
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("train", help="train one teacher, scratch or student run")
    common(sp)
    sp.add_argument("--role", required=True, choices=("teacher", "scratch", "student"))
    sp.add_argument("--teacher", help="teacher checkpoint file or teacher run directory")
    sp.add_argument("--no-resume", action="store_true", help="retrain even if a completed run exists")
    sp.add_argument("--evaluate", action="store_true", help="evaluate on the configured test view afterwards")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="run a grid of experiments")
    common(sp)
    sp.add_argument("--workers", type=int, default=0, help="parallel cells (default: available cores)")
    sp.add_argument("--resume", action="store_true", help="continue a grid whose config has changed on disk")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("evaluate", help="evaluate run directories")
    common(sp)
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--test-aug", choices=("none", "removal", "noise", "shift", "mix1", "mix2"))
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="render tables and curves from a grid manifest")
    sp.add_argument("grid", help="grid.json or the sweep output directory")
    sp.add_argument("--out", help="report directory (default: <grid dir>/report)")
    sp.add_argument("--baseline", help="row label to test every other row against")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("benchmark", help="per-sample inference latency of checkpoints")
    sp.add_argument("checkpoints", nargs="+")
    sp.add_argument("--device", default="cpu")
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--warmup", type=int, default=50)
    sp.add_argument("--window-len", type=int, default=128)
    sp.add_argument("--out", help="directory for timing.md / timing.json")
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _USER_ERRORS as e:
        print(f"kdaug: error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
