"""Command-line entry point: synth, pool, split, probe, bench, report.

Exit codes: 0 success, 1 configuration/input error, 2 report has failed cells.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import BenchConfig, render_report, run_bench, save_report, load_report, synth_generate
from .errors import PoolbenchError
from .fitted import encode_bovw, fit_bovw, fit_pca
from .pooling import ALL_METHODS, PooledMatrix, PoolingMethodSpec, pool_matrix, read_pooled, write_pooled
from .probes import DEFAULT_C_GRID, accuracy, fit_knn, fit_linear, knn_predict_batch, linear_predict_batch
from .splits import load_external_split, random_split, save_split, spatial_split
from .tiles import load_manifest

log = logging.getLogger("poolbench")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so a subcommand does not reset a flag given before it
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    return p


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="poolbench", description=__doc__, parents=[common])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--source", default="synth")

    p = sub.add_parser("pool", parents=[common], help="pool every patch of a manifest with one method")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", required=True, choices=ALL_METHODS)
    p.add_argument("--params", default="{}", help="JSON object of method parameters, e.g. '{\"p\": 4}'")
    p.add_argument("--split", default=None, help="split file; required for pca/bovw (fit on train ids)")

    p = sub.add_parser("split", parents=[common], help="write a random or spatial split file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=("random", "spatial"), required=True)
    p.add_argument("--test-frac", type=float, default=0.2)

    p = sub.add_parser("probe", parents=[common], help="score a pooled matrix on a split")
    p.add_argument("--pooled", required=True)
    p.add_argument("--manifest", required=True, help="provides labels")
    p.add_argument("--split", required=True)
    p.add_argument("--probe", choices=("knn", "linear"), required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--c-grid", type=_floats, default=list(DEFAULT_C_GRID))
    p.add_argument("--folds", type=int, default=3)

    p = sub.add_parser("bench", parents=[common], help="run the full benchmark matrix from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--format", choices=("table", "csv", "scatter"), action="append", default=None)

    p = sub.add_parser("report", parents=[common], help="re-render a saved report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("table", "csv", "scatter"), default="table")
    return parser


def _emit(text: str, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_synth(args):
    out = args.out or "synth_data"
    m = synth_generate(
        out, args.n_per_class, args.classes, args.height, args.width, args.channels, args.seed or 0, args.source
    )
    print(f"wrote {len(m)} patches to {Path(out) / 'manifest.jsonl'}")
    return 0


def cmd_pool(args):
    manifest = load_manifest(args.manifest)
    params = json.loads(args.params)
    if args.seed is not None:
        params.setdefault("seed", args.seed)
    spec = PoolingMethodSpec.from_dict({"kind": args.method, **params})
    if spec.is_parametric:
        if not args.split:
            raise PoolbenchError(f"{spec.kind} is fitted on training data; pass --split")
        split = load_external_split(args.split, manifest)
        by_id = manifest.by_id()
        if spec.kind == "pca":
            mean = pool_matrix(PoolingMethodSpec("mean"), ((r.id, manifest.load_tensor(r)) for r in manifest.records))
            model = fit_pca(mean.take(split.train_ids), spec.target_dim, split=split)
            matrix = PooledMatrix(mean.ids, model.transform(mean.values), spec)
        else:
            model = fit_bovw(
                (manifest.load_tensor(by_id[i]) for i in split.train_ids),
                spec.k, spec.seed, spec.batch_size, spec.epochs,
                ids=split.train_ids, split=split, max_pixels_per_patch=spec.max_pixels_per_patch,
            )
            rows = [encode_bovw(model, manifest.load_tensor(r)).values for r in manifest.records]
            matrix = PooledMatrix(manifest.ids, np.vstack(rows), spec)
    else:
        matrix = pool_matrix(spec, ((r.id, manifest.load_tensor(r)) for r in manifest.records))
    out = args.out or f"{spec.kind}.pve"
    write_pooled(matrix, out)
    print(f"wrote {matrix.n}x{matrix.d} {spec.kind} matrix to {out}")
    return 0


def cmd_split(args):
    manifest = load_manifest(args.manifest)
    if args.kind == "random":
        split = random_split(manifest, args.test_frac, args.seed or 0)
    else:
        split = spatial_split(manifest, args.test_frac)
    out = args.out or f"{args.kind}_split.tsv"
    save_split(split, out)
    print(f"wrote {args.kind} split ({len(split.train_ids)} train / {len(split.test_ids)} test) to {out}")
    return 0


def cmd_probe(args):
    manifest = load_manifest(args.manifest)
    matrix = read_pooled(args.pooled)
    split = load_external_split(args.split, manifest)
    labels = {r.id: r.label for r in manifest.records}
    train, test = matrix.take(split.train_ids), matrix.take(split.test_ids)
    y_train = [labels[i] for i in train.ids]
    y_test = [labels[i] for i in test.ids]
    result = {"probe": args.probe, "method": matrix.method.label, "n_train": train.n, "n_test": test.n}
    if args.probe == "knn":
        model = fit_knn(train, y_train, args.k, split=split)
        preds = knn_predict_batch(model, test.values)
    else:
        model = fit_linear(train, y_train, args.c_grid, args.folds, args.seed or 0, split=split)
        preds = linear_predict_batch(model, test.values)
        result["chosen_c"] = model.chosen_c
        result["cv_table"] = model.cv_table
    result["accuracy"] = accuracy(preds, y_test)
    _emit(json.dumps(result, indent=1) + "\n", args.out)
    return 0


def cmd_bench(args):
    config = BenchConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.jobs is not None:
        config.jobs = args.jobs
    if args.out is not None:
        config.out_dir = args.out
    config.validate()
    report = run_bench(config)
    out_dir = Path(config.out_dir or "bench_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_report(report, out_dir / "report.json")
    for fmt in args.format or ("table", "csv", "scatter"):
        ext = "md" if fmt == "table" else "csv"
        render_report(report, fmt, out_dir / f"{fmt}.{ext}")
    print(f"{len(report.cells)} cells, {len(report.failed)} failed; outputs in {out_dir}")
    for c in report.failed:
        log.warning("failed cell %s/%s/%s/%s: %s", c.source, c.method, c.probe, c.split, c.reason)
    return 2 if report.failed else 0


def cmd_report(args):
    report = load_report(args.report)
    _emit(render_report(report, args.format), args.out)
    return 2 if report.failed else 0


COMMANDS = {
    "synth": cmd_synth,
    "pool": cmd_pool,
    "split": cmd_split,
    "probe": cmd_probe,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("seed", "jobs", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PoolbenchError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
