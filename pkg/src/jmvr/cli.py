"""Command-line entry point: ``jmvr <command> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import use_float64
from .config import RunConfig
from .data import DatasetManifest, PreprocessConfig, gen_synthetic, load_preprocessed, save_png, write_stats
from .errors import ConfigError, DataError, JMVRError
from . import experiments as ex
from .train import load_model, load_split, save_model, smoothed, train

log = logging.getLogger("jmvr")


def _config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    return RunConfig.load(args.config)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args, path=None):
    """Model and config from --checkpoint, with an optional --config override."""
    cfg = RunConfig.load(args.config) if args.config else None
    model, header = load_model(path or args.checkpoint, cfg)
    return model, model.cfg, header


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def cmd_gen_synth(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    out = args.out or cfg.dataset
    if not out:
        raise ConfigError("give --out or a config with a dataset path")
    m = gen_synthetic(out, seed=_seed(args, cfg), n_classes=args.n_classes, n_per_class=args.n_per_class,
                      C=cfg.C, T=cfg.T, image_size=cfg.image_size, n_test_per_class=args.n_test_per_class,
                      n_layouts=args.n_layouts, n_palettes=args.n_palettes)
    print(f"wrote {len(m.entries)} items to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    manifest = DatasetManifest.load(cfg.dataset)
    write_stats(manifest, PreprocessConfig(target_length=cfg.T))
    if args.out:
        out = _out_dir(args, cfg)
        for split in ("train", "test"):
            entries = sorted(manifest.split(split), key=lambda e: e.stimulus_id)
            if entries:
                np.save(out / f"eeg_{split}.npy", load_preprocessed(manifest, entries), allow_pickle=False)
    print(f"wrote {manifest.root / 'stats.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = _out_dir(args, cfg)
    manifest = DatasetManifest.load(cfg.dataset)
    data = load_split(cfg, manifest, "train")
    res = train(cfg, data)
    save_model(out / "checkpoint.jmvr", res.model, cfg, cfg.steps,
               {"probe_loss": [res.probe_initial, res.probe_final]})
    smooth = smoothed(res.losses)
    ex.write_csv(out / "loss.csv", ["step", "loss", "smoothed"],
                 [(i, l, s) for i, (l, s) in enumerate(zip(res.losses, smooth))])
    plots = ex.plot_loss(res.losses, smooth, out / "loss")
    record = ex.ExperimentRecord(cfg.config_hash(), "train", plots=plots, logs={
        "probe_initial": res.probe_initial, "probe_final": res.probe_final,
        "loss_ratio": res.loss_ratio, "final_smoothed_loss": float(smooth[-1]) if len(smooth) else None,
        "ae_final_loss": res.ae_losses[-1] if res.ae_losses else None})
    record.save(out / "train_record.json")
    print(f"loss ratio {res.loss_ratio:.4f}; checkpoint {out / 'checkpoint.jmvr'}")
    return 0


def cmd_reconstruct(args) -> int:
    model, cfg, _ = _load(args)
    out = _out_dir(args, cfg)
    data = load_split(cfg, DatasetManifest.load(cfg.dataset), args.split)
    recons = ex.reconstruct(model, data, cfg, _seed(args, cfg))
    for e, img in zip(data.entries, recons):
        save_png(out / f"{e.stimulus_id}.png", img)
    save_png(out / "grid.png", ex.side_by_side(data.images, recons))
    print(f"wrote {len(recons)} reconstructions and grid.png to {out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = _load(args)
    out = _out_dir(args, cfg)
    data = load_split(cfg, DatasetManifest.load(cfg.dataset), args.split)
    recons = ex.reconstruct(model, data, cfg, _seed(args, cfg))
    report = ex.evaluate(recons, data, cfg)
    report["config_hash"] = cfg.config_hash()
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    cols = list(report["aggregate"])
    ex.write_csv(out / "metrics.csv", cols, [[report["aggregate"][c] for c in cols]])
    print(json.dumps(report["aggregate"], indent=1))
    return 0


def cmd_mask_sweep(args) -> int:
    model, cfg, _ = _load(args)
    out = _out_dir(args, cfg)
    ratios = cfg.mask_ratios if args.ratios is None else [float(r) for r in args.ratios.split(",")]
    data = load_split(cfg, DatasetManifest.load(cfg.dataset), args.split)
    rows = ex.mask_sweep(model, data, cfg, args.modality, ratios, _seed(args, cfg))
    stem = out / f"mask_{args.modality}"
    ex.write_csv(stem.with_suffix(".csv"), ["ratio", "LabEMD", "DeepEMD"],
                 [(r["ratio"], r["LabEMD"], r["DeepEMD"]) for r in rows])
    plots = ex.plot_mask_sweep(rows, args.modality, stem)
    ex.ExperimentRecord(cfg.config_hash(), f"mask-sweep {args.modality}", {"mask_sweep": rows},
                        plots=plots).save(stem.with_name(stem.name + "_record.json"))
    for r in rows:
        print(f"{r['ratio']:.2f}  LabEMD {r['LabEMD']:.4f}  DeepEMD {r['DeepEMD']:.4f}")
    return 0


def cmd_temporal(args) -> int:
    model, cfg, _ = _load(args)
    out = _out_dir(args, cfg)
    manifest = DatasetManifest.load(cfg.dataset)
    data = load_split(cfg, manifest, args.split)
    res = ex.temporal_decoding(model, data, cfg, ex.dataset_pool(manifest), _seed(args, cfg), args.stride_ms)
    ex.write_csv(out / "temporal.csv", ["t", "accuracy", "DeepEMD"],
                 [(r["t"], r["accuracy"], r["DeepEMD"]) for r in res["rows"]])
    plots = ex.plot_temporal(res["rows"], res["n_way"], out / "temporal")
    ex.ExperimentRecord(cfg.config_hash(), "temporal", {"temporal": res}, plots=plots).save(
        out / "temporal_record.json")
    for r in res["rows"]:
        print(f"t={r['t']:.0f}  acc {r['accuracy']:.3f}  DeepEMD {r['DeepEMD']:.4f}")
    return 0


def cmd_channel_weights(args) -> int:
    weight_sets, titles, cfg, manifest = [], [], None, None
    for path in args.checkpoint:
        model, cfg_i, _ = _load(args, path)
        cfg = cfg or cfg_i
        manifest = manifest or DatasetManifest.load(cfg_i.dataset)
        data = load_split(cfg_i, manifest, args.split)
        weight_sets.append(ex.channel_weights(model, data))
        titles.append("joint-modal" if cfg_i.text_on else "single-modal")
    if not manifest.montage_coords:
        raise DataError("dataset has no montage coordinates")
    out = _out_dir(args, cfg)
    header = ["channel"] + [f"weight_{i}" if len(weight_sets) > 1 else "weight" for i in range(len(weight_sets))]
    rows = [[name, *(float(w[c]) for w in weight_sets)] for c, name in enumerate(manifest.channel_names)]
    ex.write_csv(out / "channel_weights.csv", header, rows)
    plots = ex.plot_channel_weights(manifest.montage_coords, manifest.channel_names, weight_sets, titles,
                                    out / "channel_weights")
    ex.ExperimentRecord(cfg.config_hash(), "channel-weights",
                        {"weights": [w.tolist() for w in weight_sets]}, plots=plots).save(
        out / "channel_weights_record.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jmvr", description="EEG-to-image reconstruction experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, checkpoint=False, split=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="run config JSON")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            s.add_argument("--checkpoint", required=True)
        if split:
            s.add_argument("--split", default="test", choices=("train", "test"))
        s.set_defaults(fn=fn)
        return s

    g = add("gen-synth", cmd_gen_synth, "write a synthetic dataset")
    g.add_argument("--n-classes", type=int, default=4)
    g.add_argument("--n-per-class", type=int, default=2)
    g.add_argument("--n-test-per-class", type=int, default=0)
    g.add_argument("--n-layouts", type=int, default=None)
    g.add_argument("--n-palettes", type=int, default=None)
    add("preprocess", cmd_preprocess, "fit normalization statistics (and optionally dump arrays)")
    add("train", cmd_train, "train a model")
    add("reconstruct", cmd_reconstruct, "reconstruct a split", checkpoint=True, split=True)
    add("eval", cmd_eval, "reconstruct and score a split", checkpoint=True, split=True)
    m = add("mask-sweep", cmd_mask_sweep, "masking-ratio sweep", checkpoint=True, split=True)
    m.add_argument("--modality", required=True, choices=("text", "eeg"))
    m.add_argument("--ratios", default=None, help="comma-separated ratios in [0, 1]")
    t = add("temporal", cmd_temporal, "sliding-window temporal decoding", checkpoint=True, split=True)
    t.add_argument("--stride-ms", type=float, default=None)
    c = sub.add_parser("channel-weights", help="export mean channel-attention weights")
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out", default=None)
    c.add_argument("--checkpoint", required=True, nargs="+", help="one or two checkpoints")
    c.add_argument("--split", default="test", choices=("train", "test"))
    c.set_defaults(fn=cmd_channel_weights)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    use_float64()
    if args.command == "channel-weights" and len(args.checkpoint) > 2:
        print("error: at most two checkpoints", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except JMVRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
