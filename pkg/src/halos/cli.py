"""Command-line entry point.

Subcommands: ``generate`` (phantom dataset), ``train`` (one variant),
``evaluate`` (checkpoint or prediction directory), ``predict`` (dump
label maps / probabilities for a split), ``post-process`` (apply
existence flags to dumped probability maps).

Exit codes: 0 success, 2 config/schema error, 1 runtime failure; one
diagnostic line is printed to stderr on failure. ``HALOS_SEED``
overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from . import evaluator, nifti, phantom, trainer
from .config import ConfigError
from .data import ManifestError, load_manifest, load_volume, save_labelmap
from .network import load_checkpoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halos",
        description="Existence-aware multi-organ segmentation pipeline",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML/JSON config file")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="dotted config override, e.g. train.epochs=2")

    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    common(p)

    p = sub.add_parser("train", help="train one variant and evaluate it")
    common(p)
    p.add_argument("--variant", default="halos",
                   choices=sorted(cfgmod.VARIANTS))
    p.add_argument("--skip-eval", action="store_true",
                   help="stop after training (no results.json)")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or dumped predictions")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint archive to evaluate")
    p.add_argument("--pred-dir", help="directory of <id>_pred.nii.gz label maps")
    p.add_argument("--mode", action="append", dest="modes",
                   choices=["gt", "pred", "raw", "post"],
                   help="evaluation mode (repeatable)")
    p.add_argument("--dump-predictions", action="store_true")

    p = sub.add_parser("predict", help="run inference over a manifest split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", default=None, choices=["gt", "pred", "raw"])
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--dump-probs", action="store_true",
                   help="also write 4D probability maps")

    p = sub.add_parser("post-process",
                       help="re-label dumped probability maps using existence flags")
    common(p)
    p.add_argument("--probs-dir", required=True,
                   help="directory of <id>_probs.nii.gz maps from predict")

    return parser


def _parse_overrides(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got '{pair}'")
        key, raw = pair.split("=", 1)
        out[key] = yaml.safe_load(raw)
    return out


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.get("out_dir")
    if not out:
        raise ConfigError("no output directory: set out_dir in the config "
                          "or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _eval_patch(cfg):
    section = cfg.get("evaluate", {})
    patch = section.get("patch_size") or cfg.get("train", {}).get("patch_size")
    if patch is None:
        patch = (32, 32, 32)
    return tuple(int(p) for p in patch)


def _default_modes(net_cfg):
    if net_cfg.fusion_enabled:
        return ["gt", "pred"] if net_cfg.has_classifier else ["gt"]
    return ["raw"]


def cmd_generate(args, cfg) -> int:
    section = cfg.get("phantom", {})
    counts = section.get("counts", {"train": 20, "val": 5, "test": 10})
    fraction = float(section.get("voxel_labeled_fraction", 1.0))
    pc_kwargs = {k: v for k, v in section.items()
                 if k in ("grid_size", "noise_std", "resection_probability")}
    if "resection_probability" in pc_kwargs and isinstance(
            pc_kwargs["resection_probability"], dict):
        pc_kwargs["resection_probability"] = {
            str(k): float(v) for k, v in pc_kwargs["resection_probability"].items()}
    pcfg = phantom.PhantomConfig(seed=int(cfg.get("seed", 0)), **pc_kwargs)
    out = _out_dir(args, cfg)
    manifest = phantom.generate_dataset(
        pcfg, {k: int(v) for k, v in counts.items()}, fraction, out)
    doc = {"config_hash": cfgmod.config_hash(cfg),
           "resolved": cfgmod.semantic_config(cfg)}
    with open(out / "phantom_config.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(manifest.records)} phantoms under {out}")
    return 0


def _run_evaluation(model, manifest, modes, out, cfg, extra_meta,
                    dump_predictions=False) -> None:
    net_cfg = model.cfg
    patch = _eval_patch(cfg)
    overlap = float(cfg.get("evaluate", {}).get("overlap", 0.5))
    dump = dump_predictions or bool(
        cfg.get("evaluate", {}).get("dump_predictions", False))
    evaluator.evaluate(model, manifest, modes, out, patch, overlap=overlap,
                       dump_predictions=dump,
                       config_hash=cfgmod.config_hash(cfg),
                       extra_meta=extra_meta)


def cmd_train(args, cfg) -> int:
    manifest = load_manifest(_manifest_path(cfg))
    net_cfg = cfgmod.network_config(cfg)
    tr_cfg = cfgmod.train_config(cfg)
    out = _out_dir(args, cfg)

    result = trainer.train(manifest, net_cfg, tr_cfg, out)
    best = result.best_metrics
    print(f"training done: best val metrics {json.dumps(best, sort_keys=True)}")

    if args.skip_eval:
        return 0
    model = result.load_best()
    modes = cfg.get("evaluate", {}).get("modes") or _default_modes(model.cfg)
    extra = {"variant": cfg.get("variant", args.variant),
             "resolved_config": cfgmod.semantic_config(cfg)}
    _run_evaluation(model, manifest, modes, out, cfg, extra)
    print(f"evaluation written to {out / 'results.json'}")
    return 0


def _manifest_path(cfg) -> str:
    path = cfg.get("data", {}).get("manifest")
    if not path:
        raise ConfigError("config is missing data.manifest")
    return path


def cmd_evaluate(args, cfg) -> int:
    manifest = load_manifest(_manifest_path(cfg))
    out = _out_dir(args, cfg)
    if bool(args.checkpoint) == bool(args.pred_dir):
        raise ConfigError("pass exactly one of --checkpoint or --pred-dir")
    if args.pred_dir:
        evaluator.evaluate_predictions(manifest, args.pred_dir, out,
                                       config_hash=cfgmod.config_hash(cfg))
    else:
        model = load_checkpoint(args.checkpoint).build_model()
        modes = (args.modes or cfg.get("evaluate", {}).get("modes")
                 or _default_modes(model.cfg))
        extra = {"resolved_config": cfgmod.semantic_config(cfg)}
        _run_evaluation(model, manifest, modes, out, cfg, extra,
                        dump_predictions=args.dump_predictions)
    print(f"evaluation written to {out / 'results.json'}")
    return 0


def cmd_predict(args, cfg) -> int:
    manifest = load_manifest(_manifest_path(cfg))
    model = load_checkpoint(args.checkpoint).build_model()
    mode = args.mode or ("gt" if model.cfg.fusion_enabled else "raw")
    source = evaluator.mode_existence_source(mode, model)
    patch = _eval_patch(cfg)
    overlap = float(cfg.get("evaluate", {}).get("overlap", 0.5))
    out = _out_dir(args, cfg)

    n = 0
    for rec in manifest.split(args.split):
        vol = load_volume(manifest.volume_file(rec))
        probs, _, _ = evaluator.predict_soft(
            model, vol, patch, existence_source=source,
            manifest_flags=rec.existence, overlap=overlap)
        pred = evaluator.argmax_labels(probs, manifest.class_names)
        save_labelmap(pred, out / f"{rec.id}_pred.nii.gz", spacing=vol.spacing)
        if args.dump_probs:
            nifti.write(out / f"{rec.id}_probs.nii.gz", probs.astype(np.float32),
                        (1.0,) + tuple(vol.spacing))
        n += 1
    print(f"wrote {n} predictions under {out}")
    return 0


def cmd_post_process(args, cfg) -> int:
    manifest = load_manifest(_manifest_path(cfg))
    probs_dir = Path(args.probs_dir)
    out = _out_dir(args, cfg)
    n = 0
    for rec in manifest.records:
        path = probs_dir / f"{rec.id}_probs.nii.gz"
        if not path.exists():
            continue
        probs, _ = nifti.read(path)
        pred = evaluator.post_process(probs, rec.existence, manifest.class_names)
        save_labelmap(pred, out / f"{rec.id}_pred.nii.gz")
        n += 1
    if n == 0:
        raise FileNotFoundError(f"no <id>_probs.nii.gz maps found in {probs_dir}")
    print(f"post-processed {n} probability maps into {out}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "post-process": cmd_post_process,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _parse_overrides(args.set)
        variant = getattr(args, "variant", None)
        cfg = cfgmod.load_config(args.config, variant=variant,
                                 overrides=overrides)
    except (ConfigError, ManifestError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, ManifestError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
