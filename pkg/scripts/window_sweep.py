"""Window-length analysis: compute cost across window lengths, plus an
optional accuracy comparison between two window lengths on the synthetic
task (paired per fold, with a signed-rank test)."""
import argparse
import dataclasses

import numpy as np

from eegct import training as tr
from eegct.model import ModelConfig, count_flops
from synthetic_loso import make_segments, small_model_config


def flops_table(fs: float = 125.0):
    base = ModelConfig.thu_ep()
    print(f"{'window_s':>8} {'tokens':>7} {'gflops':>9}")
    rows = []
    for w in range(4, 19, 2):
        cfg = dataclasses.replace(base, input_len=int(w * fs))
        rows.append((w, cfg.seq_len, count_flops(cfg) / 1e9))
        print(f"{w:>8d} {rows[-1][1]:>7d} {rows[-1][2]:>9.3f}")
    ys = np.array([r[2] for r in rows])
    xs = np.array([r[0] for r in rows], dtype=float)
    a = np.vstack([xs, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(a, ys, rcond=None)
    resid = ys - a @ coef
    r2 = 1 - resid.var() / ys.var()
    print(f"linear fit R^2 = {r2:.5f}")


def accuracy_comparison(short_s: float, long_s: float, amplitude: float, seed: int,
                        n_folds: int):
    results = {}
    for window in (short_s, long_s):
        segset = make_segments(amplitude, seed, window_s=window)
        plan = tr.make_splits("loso", sorted(set(segset.subjects.tolist())), seed=seed)
        config = tr.TrainConfig(max_epochs=18, flooding_level=0.4,
                                early_stop_patience=12, seed=seed)
        report, _ = tr.run_cross_validation(
            segset, plan, small_model_config(segset.segments.shape[-1]), config,
            id_kind="subject", fold_indices=list(range(n_folds)))
        results[window] = [f.accuracy for f in report.folds]
        print(f"window {window:4.1f}s: mean acc {report.acc_mean:.3f}")
    a, b = results[long_s], results[short_s]
    if len(a) >= 5:
        stat, p = tr.wilcoxon_signed_rank(a, b)
        print(f"signed-rank W={stat:.1f}, two-sided p={p:.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--accuracy", action="store_true",
                    help="also train at two window lengths and compare")
    ap.add_argument("--short", type=float, default=2.0)
    ap.add_argument("--long", type=float, default=8.0)
    ap.add_argument("--amplitude", type=float, default=0.4)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--folds", type=int, default=3)
    args = ap.parse_args()
    flops_table()
    if args.accuracy:
        accuracy_comparison(args.short, args.long, args.amplitude, args.seed, args.folds)


if __name__ == "__main__":
    main()
