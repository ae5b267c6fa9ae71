"""Check that distributional pooling separates classes that differ only in spread.

Synthetic classes 2 and 3 share a zero mean and differ in per-pixel standard
deviation (0.3 vs 2.0). Mean pooling cannot separate them; std and stats can.
Prints linear-probe accuracy per method on the random and spatial splits.
"""
import argparse
import tempfile
from pathlib import Path

from poolbench.bench import BenchConfig, run_bench, synth_generate
from poolbench.tiles import save_manifest

METHODS = ["mean", "std", "stats", "mean_std", "percentiles"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n-per-class", type=int, default=50)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        full = synth_generate(tmp, n_per_class=args.n_per_class, seed=args.seed)
        var = full.subset([r.id for r in full.records if r.label in (2, 3)])
        path = Path(tmp) / "variance_classes.jsonl"
        save_manifest(var, path)
        report = run_bench(BenchConfig({"synth23": str(path)}, METHODS, probes=["linear"], seed=args.seed))

    acc = {(c.method, c.split): c.accuracy for c in report.cells}
    print(f"{'method':<12} {'random':>8} {'spatial':>8}")
    for m in METHODS:
        print(f"{m:<12} {100 * acc[m, 'random']:8.1f} {100 * acc[m, 'spatial']:8.1f}")
    for split in ("random", "spatial"):
        margin = 100 * (max(acc["std", split], acc["stats", split]) - acc["mean", split])
        print(f"{split}: best of std/stats beats mean by {margin:.1f} pp")


if __name__ == "__main__":
    main()
