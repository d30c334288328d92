"""Module ablation grid on the synthetic task: full model vs single
sub-block removals (depth conv block, separable conv blocks, channel
attention) and vs dropping the transformer back end entirely.

The default band layout (5/7/9 Hz, 1 Hz wide) needs ~1 s temporal windows
to separate, which makes the separable conv blocks the load-bearing
sub-block; widely spaced bands are solvable by the depth block alone.
"""
import argparse

from eegct import data
from eegct import preprocess as pp
from eegct import training as tr
from synthetic_loso import small_model_config

VARIANTS = {
    "full": {},
    "no_depth_block": {"use_depth_block": False},
    "no_sconv_blocks": {"n_sconv_blocks": 0},
    "no_channel_attention": {"use_sk_attention": False},
    "no_transformer": {"use_transformer": False},
}


def make_segments(bands, amplitude, seed):
    cb = tuple(data.ClassBand(f, bw, amplitude) for f, bw in bands)
    profile = data.SynthProfile(n_subjects=12, n_classes=len(cb), n_trials_per_class=4,
                                trial_len_s=20.0, fs=125.0, n_channels=8,
                                class_bands=cb, subject_gain_spread=0.2)
    bundles = data.synth_generate(profile, seed=seed)
    recipe = pp.PipelineProfile(name="custom", native_fs=125.0, window_s=4.0, step_s=2.0)
    return pp.concat_segment_sets([pp.preprocess_pipeline(b, recipe) for b in bundles])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bands", default="5:1:1,7:1:1,9:1:1",
                    help="per-class center:bandwidth:amplitude")
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--folds", type=int, default=3)
    args = ap.parse_args()

    bands = [tuple(float(x) for x in part.split(":")[:2]) for part in args.bands.split(",")]
    amplitude = float(args.bands.split(",")[0].split(":")[2])
    segset = make_segments(bands, amplitude, args.seed)
    plan = tr.make_splits("loso", sorted(set(segset.subjects.tolist())), seed=args.seed)
    config = tr.TrainConfig(max_epochs=18, flooding_level=0.4,
                            early_stop_patience=12, seed=args.seed)
    results = {}
    for name, toggles in VARIANTS.items():
        report, _ = tr.run_cross_validation(
            segset, plan, small_model_config(500, **toggles), config,
            id_kind="subject", fold_indices=list(range(args.folds)))
        results[name] = report.acc_mean
        print(f"{name:22s} acc {report.acc_mean:.3f}")
    base = results["full"]
    print("\ndrop vs full:")
    for name, acc in results.items():
        if name != "full":
            print(f"{name:22s} {base - acc:+.3f}")


if __name__ == "__main__":
    main()
