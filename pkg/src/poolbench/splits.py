"""Random (stratified) and longitude-based train/test splits, split files, and
the random-to-spatial generalization gap."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ClassTooSmall,
    DegenerateGeography,
    InvalidSplit,
    IoFailure,
    MalformedLine,
    MissingCell,
    OverlappingIds,
    UnknownId,
)
from .tiles import DatasetManifest


@dataclass(frozen=True)
class SplitAssignment:
    kind: str  # random | spatial | external
    train_ids: tuple
    test_ids: tuple
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        object.__setattr__(self, "test_ids", tuple(self.test_ids))
        if not self.train_ids or not self.test_ids:
            raise InvalidSplit(
                f"{self.kind} split needs non-empty train and test sides "
                f"(got {len(self.train_ids)} train, {len(self.test_ids)} test)"
            )
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise OverlappingIds(f"{len(overlap)} ids on both sides, e.g. {sorted(overlap)[:3]}")


def _check_frac(test_frac):
    if not 0.0 < test_frac < 1.0:
        raise ValueError(f"test_frac must be in (0, 1), got {test_frac}")


def random_split(manifest: DatasetManifest, test_frac: float = 0.2, seed: int = 0) -> SplitAssignment:
    """Seeded split stratified by class.

    Each class sends round(count * test_frac) records to test, clamped so that
    both sides keep at least one record of every class.
    """
    _check_frac(test_frac)
    by_class = defaultdict(list)
    for i, rec in enumerate(manifest.records):
        by_class[rec.label].append(i)
    rng = np.random.default_rng(seed)
    test_rows = set()
    for label in sorted(by_class):
        rows = by_class[label]
        if len(rows) < 2:
            raise ClassTooSmall(f"class {label} has {len(rows)} record(s); need at least 2")
        n_test = int(math.floor(len(rows) * test_frac + 0.5))
        n_test = min(max(n_test, 1), len(rows) - 1)
        picked = rng.permutation(len(rows))[:n_test]
        test_rows.update(rows[j] for j in picked)
    ids = manifest.ids
    train = [ids[i] for i in range(len(ids)) if i not in test_rows]
    test = [ids[i] for i in range(len(ids)) if i in test_rows]
    return SplitAssignment("random", train, test, seed, {"test_frac": test_frac})


def spatial_split(manifest: DatasetManifest, test_frac: float = 0.2) -> SplitAssignment:
    """Everything east of the (1 - test_frac) longitude quantile is test.

    Records exactly on the threshold stay in train.
    """
    _check_frac(test_frac)
    lons = np.array([r.lon for r in manifest.records], dtype=np.float64)
    if lons.size == 0 or not np.all(np.isfinite(lons)):
        raise DegenerateGeography("spatial split needs finite longitudes")
    if lons.min() == lons.max():
        raise DegenerateGeography("all longitudes are identical")
    threshold = float(np.quantile(lons, 1.0 - test_frac, method="linear"))
    train = [r.id for r in manifest.records if r.lon <= threshold]
    test = [r.id for r in manifest.records if r.lon > threshold]
    if not test:
        raise DegenerateGeography(f"no longitude exceeds the threshold {threshold}")
    return SplitAssignment(
        "spatial", train, test, None, {"test_frac": test_frac, "threshold": threshold}
    )


def save_split(split: SplitAssignment, path) -> None:
    """Write ``id<TAB>train|test`` lines, manifest order not required; header echoes kind/seed/params."""
    header = {"kind": split.kind, "seed": split.seed, "params": split.params}
    lines = ["# " + json.dumps(header, sort_keys=True)]
    lines += [f"{pid}\ttrain" for pid in split.train_ids]
    lines += [f"{pid}\ttest" for pid in split.test_ids]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_external_split(path, manifest: DatasetManifest | None = None) -> SplitAssignment:
    """Read a split file. Ids are validated against ``manifest`` when given."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    train, test = [], []
    seed, params = None, {}
    seen = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            try:
                header = json.loads(line[1:])
            except json.JSONDecodeError:
                continue  # free-form comment
            if isinstance(header, dict):
                seed = header.get("seed", seed)
                params = dict(header.get("params") or {}, source_kind=header.get("kind"))
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise MalformedLine(line_no, "expected 'id<TAB>train|test'")
        pid, side = parts
        if pid in seen:
            if seen[pid] != side:
                raise OverlappingIds(f"line {line_no}: {pid!r} assigned to both train and test")
            continue
        seen[pid] = side
        (train if side == "train" else test).append(pid)
    if manifest is not None:
        known = set(manifest.ids)
        unknown = [pid for pid in seen if pid not in known]
        if unknown:
            raise UnknownId(f"{len(unknown)} ids not in manifest, e.g. {unknown[:3]}")
    return SplitAssignment("external", train, test, seed, params)


# --------------------------------------------------------------------------- gap


@dataclass(frozen=True)
class GapEntry:
    method: str
    probe: str
    random_avg: float
    spatial_avg: float
    gap: float  # percentage points


def gap_report(cells) -> list[GapEntry]:
    """Per (method, probe): source-averaged accuracy on each split and their
    difference in percentage points, sorted by ascending gap.

    ``cells`` is an iterable of mappings (or objects) with source, method,
    probe, split and accuracy. Cells with ``accuracy`` None are treated as missing.
    """
    rows = [c if isinstance(c, dict) else vars(c) for c in cells]
    rows = [c for c in rows if c["split"] in ("random", "spatial")]
    keys = {(c["method"], c["probe"]) for c in rows}
    acc = defaultdict(dict)
    for c in rows:
        if c.get("accuracy") is not None:
            acc[(c["method"], c["probe"])].setdefault(c["split"], {})[c["source"]] = float(c["accuracy"])
    out = []
    for key in sorted(keys):
        by_split = acc.get(key, {})
        rnd, spa = by_split.get("random", {}), by_split.get("spatial", {})
        if not rnd or not spa or set(rnd) != set(spa):
            raise MissingCell(
                f"{key[0]}/{key[1]}: random sources {sorted(rnd)} vs spatial sources {sorted(spa)}"
            )
        r = sum(rnd[s] for s in sorted(rnd)) / len(rnd)
        s_ = sum(spa[s] for s in sorted(spa)) / len(spa)
        out.append(GapEntry(key[0], key[1], r, s_, 100.0 * (r - s_)))
    out.sort(key=lambda e: (e.gap, e.method, e.probe))
    return out
