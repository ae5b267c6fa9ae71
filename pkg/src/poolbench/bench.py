"""Benchmark matrix: sources x pooling methods x probes x splits.

Jobs are (source, split, method) triples; each yields one cell per probe.
Training-free pooled matrices are computed once per (source, method) and
shared across splits. Parametric pools are fitted inside their job on the
split's training ids only.
"""
from __future__ import annotations

import csv
import io
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, IoFailure, MissingCell, PoolbenchError, UnknownFormat
from .fitted import encode_bovw, fit_bovw, fit_pca
from .pooling import PooledMatrix, PoolingMethodSpec, pool_matrix
from .probes import (
    DEFAULT_C_GRID,
    accuracy,
    fit_knn,
    fit_linear,
    knn_predict_batch,
    linear_predict_batch,
)
from .splits import SplitAssignment, gap_report, load_external_split, random_split, spatial_split
from .tiles import DatasetManifest, PatchRecord, PatchTensor, load_manifest, save_manifest, write_tile

PROBES = ("knn", "linear")
SPLITS = ("random", "spatial", "external")


# ------------------------------------------------------------------ synthetic


def synth_generate(
    out_dir,
    n_per_class: int = 50,
    classes: int = 4,
    height: int = 16,
    width: int = 16,
    channels: int = 8,
    seed: int = 0,
    source: str = "synth",
) -> DatasetManifest:
    """Write a seeded toy dataset whose classes differ in mean or in spread.

    Classes 0/1 have per-channel means +1/-1 with unit std. Classes 2/3 share
    mean 0 and differ only in std (0.3 vs 2.0), so mean pooling cannot tell
    them apart. Classes beyond 4 reuse the pattern with a +2 offset on one
    channel. Longitude shifts slightly with class and adds a small drift to
    every pixel, giving the spatial split something to bite on.
    """
    if n_per_class < 4:
        raise ValueError(f"n_per_class must be >= 4, got {n_per_class}")
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    out_dir = Path(out_dir)
    tiles = out_dir / "tiles"
    try:
        tiles.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {tiles}: {exc}") from exc

    mu = (1.0, -1.0, 0.0, 0.0)
    sigma = (1.0, 1.0, 0.3, 2.0)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_per_class):
        for c in range(classes):
            pid = f"p{i * classes + c:06d}"
            lon = float(rng.uniform(0.0, 10.0) + 0.25 * c)
            lat = float(rng.uniform(45.0, 50.0))
            base = np.full(channels, mu[c % 4])
            if c >= 4:
                base[(c // 4 - 1) % channels] += 2.0
            drift = 0.1 * (lon - 5.0) / 5.0
            pix = base + drift + sigma[c % 4] * rng.standard_normal((height, width, channels))
            rel = f"tiles/{pid}.emb"
            write_tile(PatchTensor(pix.astype(np.float32)), out_dir / rel)
            records.append(PatchRecord(pid, rel, c, round(lon, 6), round(lat, 6), source))
    manifest = DatasetManifest(records, [f"class_{c}" for c in range(classes)], channels, out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# --------------------------------------------------------------------- config


@dataclass
class BenchConfig:
    sources: dict  # name -> manifest path
    methods: list
    probes: list = field(default_factory=lambda: list(PROBES))
    splits: list = field(default_factory=lambda: ["random", "spatial"])
    external_splits: dict = field(default_factory=dict)  # source -> split file
    test_frac: float = 0.2
    seed: int = 0
    knn_k: int = 5
    c_grid: list = field(default_factory=lambda: list(DEFAULT_C_GRID))
    folds: int = 3
    max_iter: int = 2000
    jobs: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        self.methods = [PoolingMethodSpec.parse(m) for m in self.methods]
        self.validate()

    def validate(self):
        if not self.sources:
            raise ConfigError("config needs at least one source")
        if not self.methods:
            raise ConfigError("config needs at least one method")
        if not self.probes or any(p not in PROBES for p in self.probes):
            raise ConfigError(f"probes must be a non-empty subset of {PROBES}, got {self.probes}")
        if not self.splits or any(s not in SPLITS for s in self.splits):
            raise ConfigError(f"splits must be a non-empty subset of {SPLITS}, got {self.splits}")
        if "external" in self.splits:
            missing = [s for s in self.sources if s not in self.external_splits]
            if missing:
                raise ConfigError(f"external split requested but no split file for sources {missing}")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"method labels must be unique, got {labels}")
        if not 0.0 < self.test_frac < 1.0:
            raise ConfigError(f"test_frac must be in (0, 1), got {self.test_frac}")
        if self.jobs < 1 or self.knn_k < 1 or self.folds < 2:
            raise ConfigError("jobs and knn_k must be >= 1, folds >= 2")
        if not self.c_grid or any(c <= 0 for c in self.c_grid):
            raise ConfigError(f"c_grid must be non-empty and positive, got {self.c_grid}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [m.to_dict() for m in self.methods]
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "BenchConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("sources", "methods"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        if base_dir is not None:
            base = Path(base_dir)
            d["sources"] = {k: str(base / v) for k, v in d["sources"].items()}
            d["external_splits"] = {k: str(base / v) for k, v in d.get("external_splits", {}).items()}
            if d.get("out_dir"):
                d["out_dir"] = str(base / d["out_dir"])
        try:
            return cls(**d)
        except PoolbenchError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "BenchConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)


# --------------------------------------------------------------------- report


@dataclass
class Cell:
    source: str
    method: str
    probe: str
    split: str
    accuracy: float | None
    pooled_dim: int | None
    wall_ms: float = 0.0
    chosen_c: float | None = None
    n_train: int = 0
    n_test: int = 0
    status: str = "ok"
    reason: str = ""

    @property
    def key(self):
        return (self.source, self.method, self.probe, self.split)


@dataclass
class BenchReport:
    cells: list
    config: dict
    version: str = __version__
    extras: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [c for c in self.cells if c.status != "ok"]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "cells": [asdict(c) for c in self.cells],
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        return cls([Cell(**c) for c in d["cells"]], d.get("config", {}), d.get("version", ""), d.get("extras", {}))


def save_report(report: BenchReport, path) -> None:
    try:
        Path(path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_report(path) -> BenchReport:
    try:
        return BenchReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc


class LeakageAudit:
    """Collects the ids consumed by every fitting step of a bench run."""

    def __init__(self):
        self.events = []
        self._lock = threading.Lock()

    def record(self, source, split, method, step, ids):
        with self._lock:
            self.events.append((source, split, method, step, frozenset(ids)))

    def violations(self, splits: dict) -> list:
        """Events whose ids are not a subset of their split's train ids."""
        bad = []
        for source, split, method, step, ids in self.events:
            train = set(splits[(source, split)].train_ids)
            if not ids <= train:
                bad.append((source, split, method, step, sorted(ids - train)))
        return bad


# ------------------------------------------------------------------------ run


def _fmt_exc(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}"


def _make_split(name, manifest, config, source) -> SplitAssignment:
    if name == "random":
        return random_split(manifest, config.test_frac, config.seed)
    if name == "spatial":
        return spatial_split(manifest, config.test_frac)
    return load_external_split(config.external_splits[source], manifest)


def _pool_all(spec, manifest) -> PooledMatrix:
    return pool_matrix(spec, ((r.id, manifest.load_tensor(r)) for r in manifest.records))


def _parametric(spec, manifest, split, mean_matrix, log):
    """Fit a parametric pool on the train ids and encode every record."""
    train_ids = list(split.train_ids)
    if spec.kind == "pca":
        train = mean_matrix.take(train_ids)
        log("fit_pca", train.ids)
        model = fit_pca(train, spec.target_dim, split=split)
        values = model.transform(mean_matrix.values)
        return PooledMatrix(list(mean_matrix.ids), values, spec)
    by_id = manifest.by_id()
    log("fit_bovw", train_ids)
    model = fit_bovw(
        (manifest.load_tensor(by_id[i]) for i in train_ids),
        k=spec.k,
        seed=spec.seed,
        batch_size=spec.batch_size,
        epochs=spec.epochs,
        ids=train_ids,
        split=split,
        max_pixels_per_patch=spec.max_pixels_per_patch,
    )
    rows = [encode_bovw(model, manifest.load_tensor(r)).values for r in manifest.records]
    return PooledMatrix(manifest.ids, np.vstack(rows), spec)


def _run_job(config, source, split_name, spec, manifest, split, pooled, audit):
    """All probe cells for one (source, split, method)."""
    t0 = time.perf_counter()

    def log(step, ids):
        if audit is not None:
            audit.record(source, split_name, spec.label, step, ids)

    def failed(probe, reason, dim=None):
        return Cell(source, spec.label, probe, split_name, None, dim, 0.0, status="failed", reason=reason)

    if isinstance(pooled, Exception):
        return [failed(p, _fmt_exc(pooled)) for p in config.probes]
    if isinstance(split, Exception):
        return [failed(p, _fmt_exc(split)) for p in config.probes]
    try:
        if spec.is_parametric:
            matrix = _parametric(spec, manifest, split, pooled, log)
        else:
            matrix = pooled
    except Exception as exc:  # per-cell isolation
        return [failed(p, _fmt_exc(exc)) for p in config.probes]
    pool_ms = 1000.0 * (time.perf_counter() - t0)

    labels = {r.id: r.label for r in manifest.records}
    train = matrix.take(split.train_ids)
    test = matrix.take(split.test_ids)
    y_train = np.array([labels[i] for i in train.ids])
    y_test = np.array([labels[i] for i in test.ids])

    cells = []
    for probe in config.probes:
        t1 = time.perf_counter()
        try:
            if probe == "knn":
                log("fit_knn", train.ids)
                model = fit_knn(train, y_train, min(config.knn_k, train.n), split=split)
                preds = knn_predict_batch(model, test.values)
                chosen_c = None
            else:
                log("fit_linear", train.ids)
                model = fit_linear(
                    train, y_train, config.c_grid, config.folds, config.seed, split=split, max_iter=config.max_iter
                )
                preds = linear_predict_batch(model, test.values)
                chosen_c = model.chosen_c
            acc = accuracy(preds, y_test)
        except Exception as exc:
            cells.append(failed(probe, _fmt_exc(exc), matrix.d))
            continue
        ms = pool_ms + 1000.0 * (time.perf_counter() - t1)
        cells.append(
            Cell(source, spec.label, probe, split_name, acc, matrix.d, ms, chosen_c, train.n, test.n)
        )
    return cells


def run_bench(config: BenchConfig, audit: LeakageAudit | None = None, *, return_splits=False):
    """Run every configured (source, method, probe, split) combination.

    Result cells are ordered by config order, independent of ``config.jobs``.
    """
    config.validate()
    manifests = {}
    for source, path in config.sources.items():
        try:
            manifests[source] = load_manifest(path)
        except PoolbenchError as exc:
            raise ConfigError(f"source {source!r}: {exc}") from exc

    splits = {}
    for source, manifest in manifests.items():
        for name in config.splits:
            try:
                splits[(source, name)] = _make_split(name, manifest, config, source)
            except PoolbenchError as exc:
                splits[(source, name)] = exc

    # training-free pools are split independent; PCA consumes mean pooling
    pool_specs = {}
    for spec in config.methods:
        if spec.kind == "pca":
            pool_specs.setdefault("__mean__", PoolingMethodSpec("mean"))
        elif not spec.is_parametric:
            pool_specs[spec.label] = spec

    def pool_task(args):
        source, label = args
        try:
            return _pool_all(pool_specs[label], manifests[source])
        except Exception as exc:
            return exc

    pool_keys = [(s, label) for s in manifests for label in pool_specs]
    with ThreadPoolExecutor(max_workers=config.jobs) as ex:
        pooled = dict(zip(pool_keys, ex.map(pool_task, pool_keys)))

    jobs = []
    for source in manifests:
        for spec in config.methods:
            if spec.kind == "pca":
                pm = pooled[(source, "__mean__")]
            elif spec.kind == "bovw":
                pm = None
            else:
                pm = pooled[(source, spec.label)]
            for name in config.splits:
                jobs.append((source, name, spec, pm))

    def job_task(job):
        source, name, spec, pm = job
        return _run_job(config, source, name, spec, manifests[source], splits[(source, name)], pm, audit)

    with ThreadPoolExecutor(max_workers=config.jobs) as ex:
        results = list(ex.map(job_task, jobs))

    order = {
        "source": {s: i for i, s in enumerate(config.sources)},
        "method": {m.label: i for i, m in enumerate(config.methods)},
        "probe": {p: i for i, p in enumerate(config.probes)},
        "split": {s: i for i, s in enumerate(config.splits)},
    }
    cells = [c for group in results for c in group]
    cells.sort(
        key=lambda c: (
            order["source"][c.source],
            order["method"][c.method],
            order["probe"][c.probe],
            order["split"][c.split],
        )
    )
    split_info = {
        f"{s}/{n}": (
            {"error": _fmt_exc(v)}
            if isinstance(v, Exception)
            else {"kind": v.kind, "n_train": len(v.train_ids), "n_test": len(v.test_ids), "params": v.params}
        )
        for (s, n), v in splits.items()
    }
    report = BenchReport(cells, config.to_dict(), __version__, {"splits": split_info})
    if return_splits:
        return report, splits
    return report


# --------------------------------------------------------------------- render

CSV_FIELDS = ("source", "method", "probe", "split", "status", "accuracy", "pooled_dim", "chosen_c", "n_train", "n_test", "reason")


def _csv(report: BenchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for c in report.cells:
        row = asdict(c)
        w.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in CSV_FIELDS])
    return buf.getvalue()


def _method_gaps(cells) -> dict:
    """gap_report per (method, probe), skipping groups with missing cells."""
    groups = {}
    for c in cells:
        groups.setdefault((c.method, c.probe), []).append(c)
    out = {}
    for key, group in groups.items():
        try:
            entries = gap_report(group)
        except MissingCell:
            continue
        if entries:
            out[key] = entries[0]
    return out


def _scatter(report: BenchReport) -> str:
    gaps = sorted(_method_gaps(report.cells).values(), key=lambda e: (e.gap, e.method, e.probe))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "probe", "random_avg", "spatial_avg", "gap_pp"))
    for e in gaps:
        w.writerow((e.method, e.probe, repr(e.random_avg), repr(e.spatial_avg), repr(e.gap)))
    return buf.getvalue()


def _mark_best(column: list, closest_to_zero=False) -> set:
    vals = [abs(v) if closest_to_zero else v for v in column if v is not None]
    if not vals:
        return set()
    best = min(vals) if closest_to_zero else max(vals)
    return {i for i, v in enumerate(column) if v is not None and (abs(v) if closest_to_zero else v) == best}


def _table(report: BenchReport) -> str:
    cells = report.cells
    sources = list(dict.fromkeys(c.source for c in cells))
    methods = list(dict.fromkeys(c.method for c in cells))
    probes = list(dict.fromkeys(c.probe for c in cells))
    split_names = [s for s in ("spatial", "random", "external") if any(c.split == s for c in cells)]
    lookup = {c.key: c.accuracy for c in cells}
    gaps = _method_gaps(cells)
    blocks = []
    for probe in probes:
        header = ["Pooling"]
        columns = []  # (label, values per method, best is closest to zero)
        for split in split_names:
            for source in sources:
                vals = [lookup.get((source, m, probe, split)) for m in methods]
                columns.append((f"{split}:{source}", vals, False))
            avgs = []
            for m in methods:
                v = [lookup.get((s, m, probe, split)) for s in sources]
                avgs.append(None if any(x is None for x in v) else sum(v) / len(v))
            columns.append((f"{split}:avg", avgs, False))
        if "random" in split_names and "spatial" in split_names:
            columns.append(("gap_pp", [gaps[(m, probe)].gap if (m, probe) in gaps else None for m in methods], True))
        header += [label for label, _, _ in columns]
        best = [_mark_best(vals, low) for _, vals, low in columns]
        lines = [f"### probe: {probe}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for i, m in enumerate(methods):
            row = [m]
            for j, (label, vals, _) in enumerate(columns):
                v = vals[i]
                if v is None:
                    text = "n/a"
                elif label == "gap_pp":
                    text = f"{v:.1f}"
                else:
                    text = f"{100.0 * v:.1f}"
                row.append(f"**{text}**" if i in best[j] else text)
            lines.append("| " + " | ".join(row) + " |")
        blocks.append("\n".join(lines))
    note = "Accuracy in %, gap in percentage points (random avg - spatial avg, from unrounded values). Best per column in bold; for the gap, closest to zero is best."
    return "\n\n".join(blocks) + "\n\n" + note + "\n"


def render_report(report: BenchReport, fmt: str = "table", out=None) -> str:
    if fmt not in ("table", "csv", "scatter"):
        raise UnknownFormat(f"unknown report format {fmt!r}; use table, csv or scatter")
    if not report.cells:
        raise ValueError("report has no cells")
    text = {"table": _table, "csv": _csv, "scatter": _scatter}[fmt](report)
    if out is not None:
        try:
            Path(out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write {out}: {exc}") from exc
    return text
