"""Command-line entry point.

Subcommands: synth, preprocess, train, eval, explain, flops, splits.
Every run writes a resolved-config record (flags, seed, package version)
into its output directory.  Exit codes: 0 success, 2 usage error,
3 missing input, 4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__, data, explain, preprocess, training
from .model import ModelConfig, count_flops

EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_INTERNAL = 4


def _default_out_root() -> str:
    return os.environ.get("EEGCT_OUT_ROOT", "runs")


def _parse_range(text: str) -> list[float]:
    """Range syntax start..end:step (inclusive), or a single value."""
    if ".." in text:
        start_s, rest = text.split("..", 1)
        end_s, step_s = rest.split(":", 1)
        start, end, step = float(start_s), float(end_s), float(step_s)
        if step <= 0 or end < start:
            raise ValueError(f"bad range {text!r}")
        values = []
        v = start
        while v <= end + 1e-9:
            values.append(round(v, 9))
            v += step
        return values
    return [float(text)]


def _parse_bands(text: str) -> tuple[data.ClassBand, ...]:
    bands = []
    for part in text.split(","):
        center, bw, amp = (float(x) for x in part.split(":"))
        bands.append(data.ClassBand(center, bw, amp))
    return tuple(bands)


def _run_dir(out: str, run_name: str | None, default_stem: str) -> Path:
    name = run_name or f"{default_stem}_{time.strftime('%Y%m%dT%H%M%S')}"
    path = Path(out) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_record(path: Path, args: argparse.Namespace, extra: dict | None = None):
    record = {"version": __version__, "resolved_args": {
        k: v for k, v in sorted(vars(args).items()) if k != "func"}}
    if extra:
        record.update(extra)
    (path / "resolved_config.json").write_text(
        json.dumps(record, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    bands = _parse_bands(args.bands)
    profile = data.SynthProfile(
        n_subjects=args.subjects, n_classes=len(bands),
        n_trials_per_class=args.trials_per_class, trial_len_s=args.trial_len_s,
        fs=args.fs, n_channels=args.channels, class_bands=bands,
        subject_gain_spread=args.gain_spread, noise_level=args.noise_level,
        line_noise_amplitude=args.line_amplitude)
    bundles = data.synth_generate(profile, args.seed)
    out = Path(args.out)
    data.write_dataset(bundles, out)
    _write_record(out, args)
    print(f"wrote {len(bundles)} subject bundles to {out}")
    return 0


def _read_channel_list(path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return tuple(line.strip() for line in lines
                 if line.strip() and not line.lstrip().startswith("#"))


def _build_profile(args) -> preprocess.PipelineProfile:
    subset = _read_channel_list(args.channels) if args.channels else None
    if args.profile == "thu_ep":
        montage = None
        if args.montage:
            montage = preprocess.load_montage(args.montage, preprocess.THU_EP_SOURCE_CHANNELS)
        return preprocess.thu_ep_profile(montage=montage, window_s=args.window_s or 14.0,
                                         step_s=args.step_s or 4.0)
    if args.profile == "deap":
        return preprocess.deap_profile(channel_subset=subset or preprocess.DEAP_28_CHANNELS,
                                       window_s=args.window_s or 12.0,
                                       step_s=args.step_s or 4.0)
    if args.window_s is None or args.native_fs is None:
        raise ValueError("custom profile requires --window-s and --native-fs")
    return preprocess.PipelineProfile(
        name="custom", native_fs=args.native_fs, window_s=args.window_s,
        step_s=args.step_s or args.window_s, channel_subset=subset,
        notch=tuple(float(x) for x in args.notch.split(":")) if args.notch else None,
        bandpass=tuple(float(x) for x in args.bandpass.split(":")) if args.bandpass else None,
        downsample=args.downsample, zero_phase=not args.no_zero_phase)


def cmd_preprocess(args) -> int:
    bundles = data.load_dataset(args.data)
    profile = _build_profile(args)
    sets = []
    for bundle in bundles:
        if args.dimension:
            bundle = data.binarize_bundle(bundle, args.dimension, args.threshold)
        sets.append(preprocess.preprocess_pipeline(bundle, profile))
    segset = preprocess.concat_segment_sets(sets)
    out = Path(args.out)
    data.save_segment_set(segset, out)
    _write_record(out, args, {"n_segments": segset.n,
                              "segment_shape": list(segset.segments.shape[1:])})
    for w in segset.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {segset.n} segments of shape {segset.segments.shape[1:]} to {out}")
    return 0


def _model_config_from(args, segset) -> ModelConfig:
    n, c, t = segset.segments.shape
    return ModelConfig(
        n_channels=c, input_len=t, n_classes=int(segset.labels.max()) + 1,
        channel_multiplier=args.c1, conv_kernel=args.kernel,
        n_sconv_blocks=0 if args.no_sconv else args.sconv_blocks,
        pool1=args.pool1, pool2=args.pool2,
        sk_kernel_sizes=tuple(int(k) for k in args.sk_kernels.split(",")),
        sk_reduction=args.sk_reduction, sk_min_dim=args.sk_min_dim,
        n_encoder_layers=args.encoder_layers, n_heads=args.heads,
        head_dim=args.head_dim, mlp_dim=args.mlp_dim, dropout_p=args.dropout,
        use_depth_block=not args.no_depth_block,
        use_sk_attention=not args.no_sk,
        use_transformer=not args.no_transformer)


def _train_config_from(args) -> training.TrainConfig:
    return training.TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
        max_epochs=args.epochs, plateau_patience=args.plateau_patience,
        plateau_factor=args.plateau_factor, flooding_level=args.flooding,
        early_stop_patience=args.early_stop_patience, seed=args.seed)


def _load_segments_for_train(args):
    root = Path(args.data)
    if (root / "segments.json").exists():
        return data.load_segment_set(root)
    # raw bundle root: preprocess in memory with the requested profile
    bundles = data.load_dataset(root)
    profile = _build_profile(args)
    sets = []
    for bundle in bundles:
        if args.dimension:
            bundle = data.binarize_bundle(bundle, args.dimension, args.threshold)
        sets.append(preprocess.preprocess_pipeline(bundle, profile))
    return preprocess.concat_segment_sets(sets)


def cmd_train(args) -> int:
    segset = _load_segments_for_train(args)
    model_config = _model_config_from(args, segset)
    train_config = _train_config_from(args)
    if args.scheme in ("csv10", "loso"):
        ids, id_kind = sorted(set(segset.subjects.tolist())), "subject"
    else:
        ids, id_kind = sorted(set(int(t) for t in segset.trials)), "trial"
    plan = training.make_splits(args.scheme, ids, seed=args.seed, val_share=args.val_share)
    fold_indices = [int(i) for i in args.folds.split(",")] if args.folds else None

    run = _run_dir(args.out, args.run_name, f"train_{args.scheme}_seed{args.seed}")
    report, runs = training.run_cross_validation(
        segset, plan, model_config, train_config, id_kind=id_kind,
        workers=args.workers, fold_indices=fold_indices)
    (run / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    (run / "metrics.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (run / "splits.json").write_text(json.dumps({
        "scheme": plan.scheme,
        "folds": [{"train": list(f.train_ids), "val": list(f.val_ids),
                   "test": list(f.test_ids)} for f in plan.folds],
    }, indent=2) + "\n", encoding="utf-8")
    for fr in runs:
        data.save_checkpoint(fr.model, run / f"checkpoint_fold{fr.fold_index}",
                             seed_record={"train_seed": args.seed, "fold": fr.fold_index})
        (run / f"history_fold{fr.fold_index}.json").write_text(
            json.dumps(fr.result.history.to_dict(), indent=2) + "\n", encoding="utf-8")
        (run / f"history_fold{fr.fold_index}.txt").write_text(
            fr.result.history.to_text(), encoding="utf-8")
    _write_record(run, args, {"model_config": model_config.to_dict()})
    print(report.to_text())
    print(f"run artifacts in {run}")
    return 0


def cmd_eval(args) -> int:
    segset = data.load_segment_set(args.data)
    model, _ = data.load_checkpoint(args.checkpoint)
    metrics = training.evaluate(model, segset.segments, segset.labels)
    report = training.MetricsReport("eval", [metrics])
    out = _run_dir(args.out, args.run_name, "eval")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "metrics.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _write_record(out, args)
    print(report.to_text())
    return 0


def cmd_explain(args) -> int:
    segset = data.load_segment_set(args.data)
    model, _ = data.load_checkpoint(args.checkpoint)
    out = _run_dir(args.out, args.run_name, "explain")
    limit = min(args.samples, segset.n) if args.samples else segset.n
    segments = segset.segments[:limit]

    if model.config.use_sk_attention:
        rep = explain.extract_channel_attention(model, segments)
        names = list(segset.channel_names) or [f"ch{i}" for i in
                                               range(rep.channel_weights.shape[1])]
        header = ["channel"] + [f"k{k}" for k in rep.stream_kernel_sizes] \
            + [f"k{k}_norm" for k in rep.stream_kernel_sizes]
        cols = [names] + [rep.channel_weights[i] for i in range(len(rep.stream_kernel_sizes))] \
            + [rep.normalized[i] for i in range(len(rep.stream_kernel_sizes))]
        explain.write_table_csv(header, cols, out / "explain_channel_attention_all.csv")
        for i, k in enumerate(rep.stream_kernel_sizes):
            explain.svg_bar_chart(rep.normalized[i], names,
                                  out / f"explain_channel_attention_k{k}.svg",
                                  title=f"channel attention, kernel size {k}")

    if model.config.use_transformer:
        seg_id = args.segment
        trace = explain.extract_self_attention(
            model, segset.segments[seg_id], segset.window_s)
        times = [i * trace.seconds_per_token for i in range(len(trace.trace))]
        explain.write_table_csv(["token_time_s", "weight", "weight_raw"],
                                [times, trace.trace, trace.raw],
                                out / f"explain_self_attention_{seg_id}.csv")
        explain.svg_heat_strip(trace.trace, out / f"explain_self_attention_{seg_id}.svg",
                               title=f"self-attention, segment {seg_id}",
                               seconds_per_cell=trace.seconds_per_token)

    blocks = []
    if model.config.use_depth_block:
        blocks.append("depth")
    blocks += [f"sconv{i + 1}" for i in range(len(model.sconv_blocks))]
    for block in blocks:
        kernels = explain.compose_kernels(model, block, fs=segset.fs)
        header = ["feature_channel"] + [f"tap{i}" for i in range(len(kernels[0].taps))]
        cols = [[k.feature_channel for k in kernels]] + [
            [k.taps[i] for k in kernels] for i in range(len(kernels[0].taps))]
        explain.write_table_csv(header, cols, out / f"explain_kernels_{block}.csv")

    for stage in explain.FEATURE_STAGES:
        feats, labels = explain.export_features(model, segments, segset.labels[:limit], stage)
        explain.write_feature_csv(feats, labels, out / f"explain_features_{stage}.csv")

    _write_record(out, args)
    print(f"explainability exports in {out}")
    return 0


def cmd_flops(args) -> int:
    import dataclasses

    rows = []
    base = ModelConfig.thu_ep() if args.profile == "thu_ep" else ModelConfig.deap()
    fs = args.fs
    for w in _parse_range(args.window_s):
        t = int(round(w * fs))
        cfg = dataclasses.replace(base, input_len=t)
        rows.append((w, t, cfg.seq_len, count_flops(cfg)))
    lines = [f"{'window_s':>8} {'samples':>8} {'tokens':>7} {'gflops':>10}"]
    for w, t, s, f in rows:
        lines.append(f"{w:>8.1f} {t:>8d} {s:>7d} {f / 1e9:>10.4f}")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    if args.out:
        out = _run_dir(args.out, args.run_name, "flops")
        (out / "flops.txt").write_text(table, encoding="utf-8")
        (out / "flops.json").write_text(json.dumps(
            [{"window_s": w, "samples": t, "tokens": s, "flops": f}
             for w, t, s, f in rows], indent=2) + "\n", encoding="utf-8")
        _write_record(out, args)
    return 0


def cmd_splits(args) -> int:
    if args.ids_file:
        ids = [line.strip() for line in
               Path(args.ids_file).read_text(encoding="utf-8").splitlines() if line.strip()]
    elif args.scheme in ("loto", "ctv10"):
        ids = list(range(args.ids))
    else:
        ids = [f"s{i:02d}" for i in range(args.ids)]
    plan = training.make_splits(args.scheme, ids, seed=args.seed, val_share=args.val_share)
    payload = {
        "scheme": plan.scheme,
        "segment_val_fraction": plan.segment_val_fraction,
        "folds": [{"train": list(f.train_ids), "val": list(f.val_ids),
                   "test": list(f.test_ids)} for f in plan.folds],
    }
    text = json.dumps(payload, indent=2) + "\n"
    print(f"{len(plan.folds)} folds; "
          + "; ".join(f"fold {i}: {len(f.train_ids)}/{len(f.val_ids)}/{len(f.test_ids)}"
                      for i, f in enumerate(plan.folds[:3]))
          + ("; ..." if len(plan.folds) > 3 else ""))
    if args.out:
        out = _run_dir(args.out, args.run_name, f"splits_{args.scheme}")
        (out / "splits.json").write_text(text, encoding="utf-8")
        _write_record(out, args)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="eegct", description=__doc__, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--subjects", type=int, default=12, help="number of subjects")
    p.add_argument("--trials-per-class", type=int, default=4, help="trials per class")
    p.add_argument("--trial-len-s", type=float, default=20.0, help="trial length, seconds")
    p.add_argument("--fs", type=float, default=125.0, help="sample rate, Hz")
    p.add_argument("--channels", type=int, default=8, help="EEG channels")
    p.add_argument("--bands", default="6:2:1,10:2:1,20:2:1",
                   help="per-class center:bandwidth:amplitude, comma-separated")
    p.add_argument("--gain-spread", type=float, default=0.2,
                   help="per-subject channel gain spread (log std)")
    p.add_argument("--noise-level", type=float, default=1.0, help="1/f background level")
    p.add_argument("--line-amplitude", type=float, default=0.0, help="50 Hz hum amplitude")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_synth)

    def add_profile_flags(p):
        p.add_argument("--profile", choices=["thu_ep", "deap", "custom"], default="custom",
                       help="preprocessing recipe")
        p.add_argument("--window-s", type=float, default=None, help="window length, seconds")
        p.add_argument("--step-s", type=float, default=None, help="window step, seconds")
        p.add_argument("--native-fs", type=float, default=None,
                       help="recording sample rate (custom profile)")
        p.add_argument("--montage", default=None,
                       help="montage file (one pos,neg pair per line)")
        p.add_argument("--channels", default=None,
                       help="channel-selection file (one channel name per line)")
        p.add_argument("--bandpass", default=None, help="lo:hi in Hz")
        p.add_argument("--notch", default=None, help="lo:hi in Hz")
        p.add_argument("--downsample", type=int, default=1, help="integer decimation factor")
        p.add_argument("--no-zero-phase", action="store_true",
                       help="single forward filter pass instead of forward-backward")
        p.add_argument("--dimension", default=None, help="rating dimension to binarize")
        p.add_argument("--threshold", type=float, default=5.0, help="rating threshold")

    p = sub.add_parser("preprocess", help="bundles -> windowed segments", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset root of subject bundles")
    p.add_argument("--out", required=True, help="segment-set output directory")
    add_profile_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="cross-validated training", formatter_class=fmt)
    p.add_argument("--data", required=True,
                   help="segment-set directory, or a raw bundle root (preprocessed "
                        "in memory with the profile flags)")
    add_profile_flags(p)
    p.add_argument("--out", default=_default_out_root(), help="output root")
    p.add_argument("--run-name", default=None, help="run directory name")
    p.add_argument("--scheme", choices=["csv10", "loso", "loto", "ctv10"],
                   default="loso", help="cross-validation scheme")
    p.add_argument("--val-share", type=float, default=0.2,
                   help="validation share of the non-test ids/segments")
    p.add_argument("--folds", default=None, help="comma-separated fold indices to run")
    p.add_argument("--workers", type=int, default=1, help="parallel fold workers")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--c1", type=int, default=4, help="feature channels per EEG channel")
    p.add_argument("--kernel", type=int, default=15, help="temporal conv kernel length")
    p.add_argument("--sconv-blocks", type=int, default=2, help="separable conv blocks")
    p.add_argument("--pool1", type=int, default=4, help="first average-pool size")
    p.add_argument("--pool2", type=int, default=5, help="second average-pool size")
    p.add_argument("--sk-kernels", default="1,3,5,7",
                   help="channel-attention branch kernel sizes")
    p.add_argument("--sk-reduction", type=int, default=4,
                   help="channel-attention mixing reduction ratio")
    p.add_argument("--sk-min-dim", type=int, default=32,
                   help="channel-attention mixing dim floor")
    p.add_argument("--encoder-layers", type=int, default=6, help="encoder layers")
    p.add_argument("--heads", type=int, default=8, help="attention heads")
    p.add_argument("--head-dim", type=int, default=256, help="query/key/value dim")
    p.add_argument("--mlp-dim", type=int, default=128, help="feedforward inner dim")
    p.add_argument("--dropout", type=float, default=0.5, help="conv-block dropout rate")
    p.add_argument("--no-depth-block", action="store_true", help="drop the depth conv block")
    p.add_argument("--no-sconv", action="store_true", help="drop the separable conv blocks")
    p.add_argument("--no-sk", action="store_true", help="drop channel attention")
    p.add_argument("--no-transformer", action="store_true",
                   help="drop the encoder; classify mean-pooled conv features")
    p.add_argument("--lr", type=float, default=0.001, help="initial learning rate")
    p.add_argument("--weight-decay", type=float, default=0.0001, help="decoupled weight decay")
    p.add_argument("--batch-size", type=int, default=16, help="batch size")
    p.add_argument("--epochs", type=int, default=100, help="max epochs")
    p.add_argument("--plateau-patience", type=int, default=10,
                   help="epochs without val improvement before lr decay")
    p.add_argument("--plateau-factor", type=float, default=0.1, help="lr decay factor")
    p.add_argument("--flooding", type=float, default=1.3, help="flooding level b")
    p.add_argument("--early-stop-patience", type=int, default=15,
                   help="epochs without val improvement before stopping")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a segment set",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="segment-set directory")
    p.add_argument("--out", default=_default_out_root(), help="output root")
    p.add_argument("--run-name", default=None, help="run directory name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="attention/kernel/feature exports",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="segment-set directory")
    p.add_argument("--out", default=_default_out_root(), help="output root")
    p.add_argument("--run-name", default=None, help="run directory name")
    p.add_argument("--segment", type=int, default=0,
                   help="segment index for the attention trace")
    p.add_argument("--samples", type=int, default=None,
                   help="cap on samples used for set-level exports")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("flops", help="flop count vs window length", formatter_class=fmt)
    p.add_argument("--profile", choices=["thu_ep", "deap"], default="thu_ep",
                   help="architecture preset")
    p.add_argument("--window-s", default="14", help="seconds; range syntax start..end:step")
    p.add_argument("--fs", type=float, default=125.0, help="model-input sample rate, Hz")
    p.add_argument("--out", default=None, help="optional output root")
    p.add_argument("--run-name", default=None, help="run directory name")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("splits", help="emit a cross-validation fold plan",
                       formatter_class=fmt)
    p.add_argument("--scheme", choices=["csv10", "loso", "loto", "ctv10"], required=True,
                   help="cross-validation scheme")
    p.add_argument("--ids", type=int, default=80, help="number of ids to generate")
    p.add_argument("--ids-file", default=None, help="file of ids, one per line")
    p.add_argument("--val-share", type=float, default=0.2,
                   help="validation share where the scheme uses one")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.add_argument("--out", default=None, help="optional output root")
    p.add_argument("--run-name", default=None, help="run directory name")
    p.set_defaults(func=cmd_splits)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (FileNotFoundError, data.MissingFileError) as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
