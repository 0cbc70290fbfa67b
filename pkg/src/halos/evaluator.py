"""Inference and evaluation.

Sliding-window prediction with Gaussian-weighted blending, hard Dice
with the missing-organ conventions (1 for a correct empty prediction,
0 for a hallucinated organ), sample-level false-positive rate, existence
classification metrics, the flag-driven post-processing baseline, and a
report writer producing ``results.json`` + ``results.md``.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .data import (
    ExistenceVector,
    LabelMap,
    Manifest,
    Volume,
    load_labelmap,
    load_volume,
    save_labelmap,
    znormalize,
)
from .network import HalosNet

EXISTENCE_SOURCES = ("ground_truth", "classifier")
CLASSIFIER_THRESHOLD = 0.5


# -- sliding-window machinery ----------------------------------------------

def gaussian_importance_map(patch_size, sigma_scale: float = 1.0 / 8) -> np.ndarray:
    """Center-peaked blending weights for one patch, max-normalized to 1."""
    w = np.zeros(patch_size, dtype=np.float64)
    w[tuple(s // 2 for s in patch_size)] = 1.0
    w = gaussian_filter(w, sigma=[s * sigma_scale for s in patch_size],
                        mode="constant")
    w /= w.max()
    w[w == 0] = w[w > 0].min()
    return w.astype(np.float32)


def sliding_window_steps(image_size, patch_size, overlap: float = 0.5):
    """Start coordinates per axis so consecutive windows overlap by ``overlap``."""
    steps = []
    for img, patch in zip(image_size, patch_size):
        if patch > img:
            raise ValueError(f"patch {patch} exceeds image extent {img}")
        target = patch * (1.0 - overlap)
        n = int(np.ceil((img - patch) / target)) + 1 if img > patch else 1
        if n == 1:
            steps.append([0])
        else:
            actual = (img - patch) / (n - 1)
            steps.append([int(round(actual * i)) for i in range(n)])
    return steps


def _pad_to_min(data: np.ndarray, minimum) -> np.ndarray:
    pads = [(0, max(m - s, 0)) for s, m in zip(data.shape, minimum)]
    if any(p[1] for p in pads):
        data = np.pad(data, pads)
    return data


def sliding_window_probs(model: HalosNet, data: np.ndarray, patch_size,
                         existence: Optional[np.ndarray] = None,
                         overlap: float = 0.5,
                         use_gaussian: bool = True) -> np.ndarray:
    """Blended class probabilities of shape (num_classes, D, H, W).

    ``data`` must already be normalized as during training. Windows of
    ``patch_size`` advance with the given overlap; per-window softmax maps
    are averaged with Gaussian importance weights.
    """
    cfg = model.cfg
    factor = 2 ** cfg.num_levels
    if any(p % factor for p in patch_size):
        raise ValueError(f"patch size {tuple(patch_size)} must be divisible "
                         f"by {factor}")
    orig_shape = data.shape
    padded = _pad_to_min(data, patch_size)

    if existence is not None:
        e = torch.as_tensor(existence, dtype=torch.float32).reshape(1, -1)
    else:
        e = None

    weight = (gaussian_importance_map(patch_size) if use_gaussian
              else np.ones(patch_size, dtype=np.float32))
    accum = np.zeros((cfg.num_classes,) + padded.shape, dtype=np.float32)
    norm = np.zeros(padded.shape, dtype=np.float32)

    steps = sliding_window_steps(padded.shape, patch_size, overlap)
    model.eval()
    with torch.no_grad():
        for z in steps[0]:
            for y in steps[1]:
                for x in steps[2]:
                    sl = (slice(z, z + patch_size[0]),
                          slice(y, y + patch_size[1]),
                          slice(x, x + patch_size[2]))
                    patch = torch.from_numpy(padded[sl]).float()[None, None]
                    out = model(patch, e)
                    probs = torch.softmax(out.logits, dim=1)[0].numpy()
                    accum[(slice(None),) + sl] += probs * weight
                    norm[sl] += weight
    accum /= norm
    return accum[(slice(None),) + tuple(slice(0, s) for s in orig_shape)]


def argmax_labels(probs: np.ndarray, class_names) -> LabelMap:
    """Argmax over the class axis; ties resolve to the lowest class index."""
    return LabelMap(data=np.argmax(probs, axis=0).astype(np.uint8),
                    class_names=tuple(class_names))


def classify_volume(model: HalosNet, data: np.ndarray) -> np.ndarray:
    """Existence probabilities from one whole (normalized) volume."""
    factor = 2 ** model.cfg.num_levels
    padded = _pad_to_min(data, [int(np.ceil(s / factor)) * factor
                                   for s in data.shape])
    model.eval()
    with torch.no_grad():
        p = model.classify(torch.from_numpy(padded).float()[None, None])
    return p[0].numpy()


def predict_soft(model: HalosNet, volume: Volume, patch_size,
                 existence_source: str = "ground_truth",
                 manifest_flags: Optional[ExistenceVector] = None,
                 overlap: float = 0.5):
    """Normalized inference returning (probs, fusion flags used, clf probs)."""
    if existence_source not in EXISTENCE_SOURCES:
        raise ValueError(f"existence_source must be one of {EXISTENCE_SOURCES}")
    data = znormalize(volume.data)

    clf_probs = None
    fusion_flags = None
    if model.cfg.fusion_enabled:
        if existence_source == "ground_truth":
            if manifest_flags is None:
                raise ValueError("ground_truth fusion requires manifest flags")
            fusion_flags = manifest_flags.as_array()
        else:
            if model.classifier is None:
                raise ValueError("classifier fusion requested but the model "
                                 "has no classifier head")
            clf_probs = classify_volume(model, data)
            fusion_flags = (clf_probs >= CLASSIFIER_THRESHOLD).astype(np.float32)
    elif existence_source == "classifier":
        if model.classifier is None:
            raise ValueError("classifier mode requested on a model without "
                             "a classifier head")
        clf_probs = classify_volume(model, data)

    probs = sliding_window_probs(model, data, patch_size,
                                 existence=fusion_flags, overlap=overlap)
    return probs, fusion_flags, clf_probs


def predict_volume(model: HalosNet, volume: Volume, patch_size,
                   existence_source: str = "ground_truth",
                   manifest_flags: Optional[ExistenceVector] = None,
                   class_names=None, overlap: float = 0.5) -> LabelMap:
    """Sliding-window prediction of one volume as a hard label map."""
    probs, _, _ = predict_soft(model, volume, patch_size,
                               existence_source=existence_source,
                               manifest_flags=manifest_flags, overlap=overlap)
    names = class_names or [str(i) for i in range(probs.shape[0])]
    return argmax_labels(probs, names)


# -- metrics ----------------------------------------------------------------

def dice_score(pred: LabelMap, gt: LabelMap, organ: str) -> float:
    """Hard Dice; 1 when the organ is absent from both, 0 when hallucinated."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {gt.data.shape}")
    if organ not in gt.class_names:
        raise ValueError(f"unknown organ '{organ}'")
    c = gt.class_names.index(organ)
    p = pred.data == c
    g = gt.data == c
    gsum = int(g.sum())
    psum = int(p.sum())
    if gsum == 0:
        return 1.0 if psum == 0 else 0.0
    return 2.0 * int((p & g).sum()) / (psum + gsum)


def sample_fpr(preds: Sequence[LabelMap], flags: Sequence[ExistenceVector],
               organ: str) -> Optional[float]:
    """Share of organ-absent samples with at least one hallucinated voxel.

    Returns None (not applicable) when no sample lacks the organ.
    """
    if len(preds) != len(flags):
        raise ValueError("prediction and flag lists differ in length")
    fp = tn = 0
    for pred, flag in zip(preds, flags):
        if flag.flags[organ] == 1:
            continue
        if pred.voxel_count(organ) > 0:
            fp += 1
        else:
            tn += 1
    if fp + tn == 0:
        return None
    return fp / (fp + tn)


def voxel_fp_count(pred: LabelMap, flags: ExistenceVector, organ: str) -> int:
    """Voxels labeled as an organ the sample does not have."""
    if flags.flags[organ] != 0:
        raise ValueError(f"not applicable: '{organ}' is present in this sample")
    return pred.voxel_count(organ)


def classification_metrics(pred_flags: Sequence[int],
                           true_flags: Sequence[int]) -> dict:
    """Confusion counts and scores for one organ; positive = organ present."""
    if len(pred_flags) != len(true_flags) or not true_flags:
        raise ValueError("flag lists must be aligned and non-empty")
    tp = sum(1 for p, t in zip(pred_flags, true_flags) if p == 1 and t == 1)
    tn = sum(1 for p, t in zip(pred_flags, true_flags) if p == 0 and t == 0)
    fp = sum(1 for p, t in zip(pred_flags, true_flags) if p == 1 and t == 0)
    fn = sum(1 for p, t in zip(pred_flags, true_flags) if p == 0 and t == 1)
    out = {"tp": tp, "tn": tn, "fp": fp, "fn": fn}
    out["fpr"] = fp / (fp + tn) if fp + tn > 0 else None
    out["f1"] = (2 * tp / (2 * tp + fp + fn)) if 2 * tp + fp + fn > 0 else None
    if tp + fn > 0 and tn + fp > 0:
        out["balanced_accuracy"] = 0.5 * (tp / (tp + fn) + tn / (tn + fp))
        out["degenerate"] = False
    else:
        # single-class truth: balanced accuracy undefined
        out["balanced_accuracy"] = None
        out["degenerate"] = True
    return out


def post_process(pred_soft: np.ndarray, flags: ExistenceVector,
                 class_names) -> LabelMap:
    """Zero absent organs' probabilities before argmax.

    Voxels that would have been hallucinated fall to the runner-up class
    instead of leaving a background hole.
    """
    probs = np.array(pred_soft, copy=True)
    names = tuple(class_names)
    for organ, present in flags.flags.items():
        if present == 0:
            probs[names.index(organ)] = 0.0
    return argmax_labels(probs, names)


# -- dataset-level evaluation ------------------------------------------------

def mode_existence_source(mode: str, model: HalosNet):
    """Resolve an evaluation mode to a fusion source for ``predict_soft``."""
    fusion = model.cfg.fusion_enabled
    if mode in ("gt", "post"):
        return "ground_truth"
    if mode == "pred":
        if not fusion:
            raise ValueError("mode 'pred' needs a fusion-enabled model")
        return "classifier"
    if mode == "raw":
        if fusion:
            raise ValueError("mode 'raw' is undefined for fusion-enabled models")
        return "ground_truth"  # unused: fusion disabled
    raise ValueError(f"unknown evaluation mode '{mode}'")


def evaluate(model: HalosNet, manifest: Manifest, modes: Sequence[str],
             out_dir, patch_size, overlap: float = 0.5,
             dump_predictions: bool = False, config_hash: str = "",
             extra_meta: Optional[dict] = None) -> dict:
    """Run all requested modes over the manifest's test split.

    Dice is computed on voxel-labeled test records; hallucination and
    classifier metrics use every test record's existence flags. Writes
    ``results.json`` and ``results.md`` under ``out_dir`` and returns the
    results dictionary.
    """
    records = manifest.split("test")
    if not records:
        raise ValueError("manifest has no test records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    organs = [c for c in manifest.class_names if c != "background"]
    removable = list(manifest.removable_organs)

    # per-record base data
    volumes = [load_volume(manifest.volume_file(r)) for r in records]
    gts = [load_labelmap(manifest.labelmap_file(r), manifest.class_names)
           if r.voxel_labeled else None for r in records]

    classifier_report = None
    results_modes: dict[str, dict] = {}
    for mode in modes:
        source = mode_existence_source(mode, model)
        preds: list[LabelMap] = []
        clf_flags: list[Optional[np.ndarray]] = []
        for rec, vol in zip(records, volumes):
            probs, _, clf_probs = predict_soft(
                model, vol, patch_size, existence_source=source,
                manifest_flags=rec.existence, overlap=overlap)
            if mode == "post":
                pred = post_process(probs, rec.existence, manifest.class_names)
            else:
                pred = argmax_labels(probs, manifest.class_names)
            preds.append(pred)
            clf_flags.append(clf_probs)
            if dump_predictions:
                pdir = out_dir / "predictions" / mode
                pdir.mkdir(parents=True, exist_ok=True)
                save_labelmap(pred, pdir / f"{rec.id}_pred.nii.gz",
                              spacing=vol.spacing)

        results_modes[mode] = summarize_predictions(
            preds, records, gts, organs, removable)

        if classifier_report is None and model.classifier is not None:
            classifier_report = {}
            for j, organ in enumerate(removable):
                cp = [c for c in clf_flags if c is not None]
                if len(cp) != len(records):
                    cp = [classify_volume(model, znormalize(v.data))
                          for v in volumes]
                predicted = [int(c[j] >= CLASSIFIER_THRESHOLD) for c in cp]
                truth = [r.existence.flags[organ] for r in records]
                classifier_report[organ] = classification_metrics(predicted, truth)

    results = {
        "config_hash": config_hash,
        "network": asdict(model.cfg),
        "num_test_records": len(records),
        "num_labeled_test_records": sum(1 for g in gts if g is not None),
        "classifier": classifier_report,
        "modes": results_modes,
    }
    if extra_meta:
        results["meta"] = extra_meta

    write_results(results, out_dir, organs, removable, modes)
    return results


def summarize_predictions(preds: Sequence[LabelMap], records, gts,
                          organs, removable) -> dict:
    """Aggregate per-organ Dice and hallucination metrics for one mode."""
    per_organ: dict[str, dict] = {}
    for organ in organs:
        entry: dict = {}
        dices, present_dices = [], []
        for pred, rec, gt in zip(preds, records, gts):
            if gt is None:
                continue
            d = dice_score(pred, gt, organ)
            dices.append(d)
            present = (rec.existence.flags[organ] == 1
                       if organ in rec.existence.flags else True)
            if present:
                present_dices.append(d)
        if dices:
            entry["dice_mean"] = float(np.mean(dices))
            entry["dice_std"] = float(np.std(dices))
            entry["n_dice"] = len(dices)
        if present_dices:
            entry["dice_present_mean"] = float(np.mean(present_dices))
            entry["n_present_dice"] = len(present_dices)
        if organ in removable:
            seg_flags = [int(p.voxel_count(organ) > 0) for p in preds]
            truth = [r.existence.flags[organ] for r in records]
            entry.update(classification_metrics(seg_flags, truth))
            fpr = sample_fpr(preds, [r.existence for r in records], organ)
            entry["sample_fpr"] = fpr
            vfp = [voxel_fp_count(p, r.existence, organ)
                   for p, r in zip(preds, records)
                   if r.existence.flags[organ] == 0]
            if vfp:
                entry["voxel_fp_mean"] = float(np.mean(vfp))
                entry["voxel_fp_max"] = int(np.max(vfp))
        per_organ[organ] = entry

    out = {"per_organ": per_organ}
    means = [per_organ[o]["dice_mean"] for o in organs
             if "dice_mean" in per_organ[o]]
    if means:
        out["dice_mean"] = float(np.mean(means))
    present_means = [per_organ[o]["dice_present_mean"] for o in organs
                     if "dice_present_mean" in per_organ[o]]
    if present_means:
        out["dice_present_mean"] = float(np.mean(present_means))
    return out


def evaluate_predictions(manifest: Manifest, pred_dir, out_dir,
                         config_hash: str = "") -> dict:
    """Metrics for already-dumped ``<id>_pred.nii.gz`` label maps."""
    records = manifest.split("test")
    if not records:
        raise ValueError("manifest has no test records")
    pred_dir = Path(pred_dir)
    preds = []
    for rec in records:
        path = pred_dir / f"{rec.id}_pred.nii.gz"
        if not path.exists():
            raise FileNotFoundError(f"missing prediction {path}")
        preds.append(load_labelmap(path, manifest.class_names))
    gts = [load_labelmap(manifest.labelmap_file(r), manifest.class_names)
           if r.voxel_labeled else None for r in records]
    organs = [c for c in manifest.class_names if c != "background"]
    removable = list(manifest.removable_organs)
    results = {
        "config_hash": config_hash,
        "num_test_records": len(records),
        "num_labeled_test_records": sum(1 for g in gts if g is not None),
        "classifier": None,
        "modes": {"dir": summarize_predictions(preds, records, gts,
                                               organs, removable)},
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results(results, out_dir, organs, removable, ["dir"])
    return results


# -- report emission ----------------------------------------------------------

def _fmt(x, digits=3):
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.{digits}f}"
    return str(x)


def write_results(results: dict, out_dir, organs, removable, modes) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "results.json", "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")

    lines = ["# Evaluation results", ""]
    header = "| Mode | Dice mean | " + " | ".join(organs) + " | FPR |"
    sep = "|" + "---|" * (len(organs) + 3)
    lines += [header, sep]
    for mode in modes:
        m = results["modes"][mode]
        per = m["per_organ"]
        fprs = [per[o].get("sample_fpr") for o in removable
                if o in per and per[o].get("sample_fpr") is not None]
        row = [mode, _fmt(m.get("dice_mean"))]
        row += [_fmt(per[o].get("dice_mean")) if o in per else "n/a"
                for o in organs]
        row += [_fmt(fprs[0]) if fprs else "n/a"]
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")

    lines += ["| Mode | Organ | FP | TN | TP | FN | FPR | F1 |",
              "|---|---|---|---|---|---|---|---|"]
    for mode in modes:
        per = results["modes"][mode]["per_organ"]
        for organ in removable:
            e = per.get(organ, {})
            lines.append("| " + " | ".join(
                [mode, organ] + [_fmt(e.get(k)) for k in
                                 ("fp", "tn", "tp", "fn", "sample_fpr", "f1")]) + " |")
    lines.append("")

    if results.get("classifier"):
        lines += ["| Classifier organ | BAcc | TP | TN | FP | FN |",
                  "|---|---|---|---|---|---|"]
        for organ, e in results["classifier"].items():
            lines.append("| " + " | ".join(
                [organ, _fmt(e.get("balanced_accuracy"))]
                + [str(e[k]) for k in ("tp", "tn", "fp", "fn")]) + " |")
        lines.append("")

    with open(out_dir / "results.md", "w") as f:
        f.write("\n".join(lines))
