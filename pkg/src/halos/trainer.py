"""Mixed-supervision training.

Every optimization step draws one batch of voxel-labeled patches (for the
segmentation loss, with ground-truth existence flags feeding the fusion
sites) and one batch of image-label-only patches (for the existence
classifier), then takes a single SGD step on
``alpha * L_seg + (1 - alpha) * L_clf``.

All randomness flows from ``TrainConfig.seed``; with the in-process
single-worker loader used here, identical configs give identical
checkpoints and logs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from . import evaluator
from .data import LabelMap, Manifest, load_labelmap, load_volume, znormalize
from .losses import (
    DiceConfig,
    LossWeights,
    clf_loss,
    combined_loss,
    existence_class_weights,
    seg_loss,
)
from .network import HalosNet, NetworkConfig, load_checkpoint, save_checkpoint

FOREGROUND_PATCH_FRACTION = 1.0 / 3.0


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    seg_batch_size: int = 2
    clf_batch_size: int = 4
    epochs: int = 50
    lr_seg: float = 0.02
    lr_clf: float = 0.02
    weight_decay: float = 3e-5
    patch_size: tuple[int, int, int] = (32, 32, 32)
    oversample_missing: bool = False
    fusion_train_input: str = "ground_truth"
    dice: DiceConfig = field(default_factory=DiceConfig)
    dynamic_ce_weights: bool = True
    augment: bool = True
    seed: int = 0
    norm: str = "instance"

    def __post_init__(self):
        if self.seg_batch_size < 1 or self.clf_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.fusion_train_input != "ground_truth":
            raise ValueError("fusion during training is fed ground-truth flags; "
                             f"got '{self.fusion_train_input}'")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")


# -- sampling and patch extraction -------------------------------------------

def make_sampler(records, oversample_missing: bool, seed):
    """Infinite index stream over ``records``.

    Without oversampling each record appears exactly once per block of
    ``len(records)`` draws (shuffled epochs). With oversampling, draws are
    with replacement and half the probability mass sits on samples missing
    at least one removable organ; with only one group present this
    degenerates to the uniform shuffled stream.
    """
    if not records:
        raise ValueError("cannot sample from an empty record list")
    rng = np.random.default_rng(seed)
    n = len(records)
    missing = [i for i, r in enumerate(records)
               if any(v == 0 for v in r.existence.flags.values())]
    present = [i for i in range(n) if i not in set(missing)]

    if oversample_missing and missing and present:
        while True:
            if rng.random() < 0.5:
                yield missing[int(rng.integers(len(missing)))]
            else:
                yield present[int(rng.integers(len(present)))]
    else:
        while True:
            for i in rng.permutation(n):
                yield int(i)


def extract_patches(volume: np.ndarray, labelmap: Optional[np.ndarray],
                    patch_size, rng, count: int = 1,
                    fg_fraction: float = FOREGROUND_PATCH_FRACTION):
    """Random patch pairs with foreground-biased center sampling.

    At least ``fg_fraction`` of draws center the window on a foreground
    voxel (when any exists). Volumes smaller than the patch are zero-padded
    first. Returns a list of (volume_patch, label_patch_or_None) tuples.
    """
    patch = tuple(int(p) for p in patch_size)
    pads = [(0, max(p - s, 0)) for s, p in zip(volume.shape, patch)]
    if any(p[1] for p in pads):
        volume = np.pad(volume, pads)
        if labelmap is not None:
            labelmap = np.pad(labelmap, pads)

    fg = None
    if labelmap is not None and labelmap.any():
        fg = np.argwhere(labelmap > 0)

    out = []
    for _ in range(count):
        if fg is not None and rng.random() < fg_fraction:
            center = fg[int(rng.integers(len(fg)))]
            start = [int(np.clip(c - p // 2, 0, s - p))
                     for c, p, s in zip(center, patch, volume.shape)]
        else:
            start = [int(rng.integers(s - p + 1))
                     for p, s in zip(patch, volume.shape)]
        sl = tuple(slice(st, st + p) for st, p in zip(start, patch))
        out.append((volume[sl], labelmap[sl] if labelmap is not None else None))
    return out


def _augment(vol: np.ndarray, lab: Optional[np.ndarray], rng):
    """Random flips, occasional small affine, occasional Gaussian noise."""
    shape = vol.shape
    for axis in range(3):
        if rng.random() < 0.5:
            vol = np.flip(vol, axis)
            if lab is not None:
                lab = np.flip(lab, axis)
    if rng.random() < 0.2:
        angle = rng.uniform(-10, 10)
        scale = rng.uniform(0.9, 1.1)
        axes = tuple(int(a) for a in rng.choice(3, size=2, replace=False))
        vol = ndimage.rotate(vol, angle, axes=axes, reshape=False, order=1,
                             mode="nearest")
        vol = _crop_or_pad_to(ndimage.zoom(vol, scale, order=1, mode="nearest"),
                              shape)
        if lab is not None:
            lab = ndimage.rotate(lab, angle, axes=axes, reshape=False, order=0,
                                 mode="nearest")
            lab = _crop_or_pad_to(ndimage.zoom(lab, scale, order=0,
                                               mode="nearest"), shape)
    if rng.random() < 0.15:
        vol = vol + rng.normal(0.0, rng.uniform(0.0, 0.1), vol.shape)
    return np.ascontiguousarray(vol, dtype=np.float32), (
        np.ascontiguousarray(lab) if lab is not None else None)


def _crop_or_pad_to(arr: np.ndarray, shape):
    """Center-crop or zero-pad ``arr`` to ``shape`` after zooming."""
    out = arr
    for axis, target in enumerate(shape):
        cur = out.shape[axis]
        if cur > target:
            start = (cur - target) // 2
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + target)
            out = out[tuple(sl)]
        elif cur < target:
            pads = [(0, 0)] * out.ndim
            before = (target - cur) // 2
            pads[axis] = (before, target - cur - before)
            out = np.pad(out, pads)
    return out


# -- in-memory dataset --------------------------------------------------------

class _LoadedRecord:
    def __init__(self, manifest: Manifest, record):
        self.record = record
        self.volume = znormalize(load_volume(manifest.volume_file(record)).data)
        self.labels = None
        if record.voxel_labeled:
            self.labels = load_labelmap(manifest.labelmap_file(record),
                                        manifest.class_names).data
        self.existence = record.existence.as_array()


def _load_split(manifest: Manifest, split: str) -> list[_LoadedRecord]:
    return [_LoadedRecord(manifest, r) for r in manifest.split(split)]


# -- training loop -------------------------------------------------------------

def _poly_lr(base_lr: float, epoch: int, total: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - epoch / total) ** power


def _classifier_params(model: HalosNet):
    if model.classifier is None:
        return []
    return list(model.classifier.parameters())


def train(manifest: Manifest, net_cfg: NetworkConfig, cfg: TrainConfig,
          out_dir) -> "TrainResult":
    """Train one model; returns the best checkpoint and its metrics.

    Writes ``best.ckpt``, ``last.ckpt`` and ``train_log.csv`` under
    ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net_cfg = replace(net_cfg, norm=cfg.norm)

    factor = 2 ** net_cfg.num_levels
    if any(p % factor for p in cfg.patch_size):
        raise ValueError(f"patch size {cfg.patch_size} must be divisible "
                         f"by {factor}")
    if not net_cfg.has_classifier and cfg.alpha != 1.0:
        raise ValueError("alpha must be 1.0 when the classifier is disabled")

    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)

    train_records = _load_split(manifest, "train")
    val_records = _load_split(manifest, "val")
    seg_pool = [r for r in train_records if r.labels is not None]
    clf_pool = [r for r in train_records if r.labels is None]
    if not seg_pool:
        raise ValueError("training split has no voxel-labeled records")
    if net_cfg.has_classifier and not clf_pool:
        raise ValueError("classifier training needs image-label-only records "
                         "in the training split")

    model = HalosNet(net_cfg)
    weights = LossWeights(
        alpha=cfg.alpha,
        clf_class_weights=(existence_class_weights(manifest)
                           if net_cfg.has_classifier else {}),
    )

    clf_params = _classifier_params(model)
    clf_ids = {id(p) for p in clf_params}
    base_params = [p for p in model.parameters() if id(p) not in clf_ids]
    groups = [{"params": base_params, "lr": cfg.lr_seg}]
    if clf_params:
        groups.append({"params": clf_params, "lr": cfg.lr_clf})
    optimizer = torch.optim.SGD(groups, momentum=0.99, nesterov=True,
                                weight_decay=cfg.weight_decay)

    seg_sampler = make_sampler([r.record for r in seg_pool],
                               cfg.oversample_missing, [cfg.seed, 1])
    clf_sampler = (make_sampler([r.record for r in clf_pool], False,
                                [cfg.seed, 2]) if clf_pool else None)
    patch_rng = np.random.default_rng([cfg.seed, 3])
    aug_rng = np.random.default_rng([cfg.seed, 4])

    steps_per_epoch = math.ceil(len(seg_pool) / cfg.seg_batch_size)
    organs = list(manifest.removable_organs)
    foreground = [c for c in manifest.class_names if c != "background"]

    log_path = out_dir / "train_log.csv"
    log_fields = (["epoch", "lr", "loss_seg", "loss_clf", "loss_total"]
                  + [f"val_dice_{o}" for o in foreground]
                  + ["val_mean_dice", "val_balanced_accuracy"])
    log_file = open(log_path, "w", newline="")
    log = csv.DictWriter(log_file, fieldnames=log_fields)
    log.writeheader()

    best_score = -math.inf
    best_metrics: dict = {}
    history = []
    try:
        for epoch in range(cfg.epochs):
            lr_factor = _poly_lr(1.0, epoch, cfg.epochs)
            optimizer.param_groups[0]["lr"] = cfg.lr_seg * lr_factor
            if len(optimizer.param_groups) > 1:
                optimizer.param_groups[1]["lr"] = cfg.lr_clf * lr_factor

            model.train()
            sums = {"seg": 0.0, "clf": 0.0, "total": 0.0}
            for step in range(steps_per_epoch):
                l_seg = _seg_step(model, net_cfg, cfg, seg_pool, seg_sampler,
                                  patch_rng, aug_rng)
                if net_cfg.has_classifier:
                    l_clf = _clf_step(model, net_cfg, cfg, clf_pool,
                                      clf_sampler, aug_rng, weights, organs)
                else:
                    l_clf = torch.zeros(())
                total = combined_loss(l_seg, l_clf, cfg.alpha)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"seg={l_seg.detach():.4g} clf={l_clf.detach():.4g}")
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                sums["seg"] += float(l_seg.detach())
                sums["clf"] += float(l_clf.detach())
                sums["total"] += float(total.detach())

            val = _validate(model, net_cfg, val_records, foreground, organs)
            row = {
                "epoch": epoch,
                "lr": optimizer.param_groups[0]["lr"],
                "loss_seg": sums["seg"] / steps_per_epoch,
                "loss_clf": sums["clf"] / steps_per_epoch,
                "loss_total": sums["total"] / steps_per_epoch,
                "val_mean_dice": val.get("mean_dice"),
                "val_balanced_accuracy": val.get("balanced_accuracy"),
            }
            for o in foreground:
                row[f"val_dice_{o}"] = val.get(f"dice_{o}")
            log.writerow(row)
            log_file.flush()
            history.append(row)

            score = _selection_score(val, net_cfg.has_classifier)
            meta = {"epoch": epoch, "val": val, "score": score,
                    "train_config": _config_dict(cfg)}
            save_checkpoint(out_dir / "last.ckpt", model, optimizer, meta=meta)
            if score >= best_score:
                best_score = score
                best_metrics = val
                save_checkpoint(out_dir / "best.ckpt", model, optimizer,
                                meta=meta)
    finally:
        log_file.close()

    return TrainResult(
        checkpoint_path=out_dir / "best.ckpt",
        best_metrics=best_metrics,
        history=history,
        model=model,
    )


@dataclass
class TrainResult:
    checkpoint_path: Path
    best_metrics: dict
    history: list
    model: HalosNet

    def load_best(self) -> HalosNet:
        return load_checkpoint(self.checkpoint_path).build_model()


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["patch_size"] = list(cfg.patch_size)
    return d


def _seg_step(model, net_cfg, cfg, seg_pool, sampler, patch_rng, aug_rng):
    vols, labs, flags = [], [], []
    for _ in range(cfg.seg_batch_size):
        rec = seg_pool[next(sampler)]
        (v, l), = extract_patches(rec.volume, rec.labels, cfg.patch_size,
                                  patch_rng)
        if cfg.augment:
            v, l = _augment(v, l, aug_rng)
        vols.append(v)
        labs.append(l)
        flags.append(rec.existence)
    x = torch.from_numpy(np.stack(vols)).unsqueeze(1)
    y = torch.from_numpy(np.stack(labs).astype(np.int64))
    e = (torch.from_numpy(np.stack(flags)) if net_cfg.fusion_enabled else None)
    out = model(x, e)
    return seg_loss(out, y, cfg.dice, dynamic_ce_weights=cfg.dynamic_ce_weights)


def _clf_step(model, net_cfg, cfg, clf_pool, sampler, aug_rng, weights,
              organs):
    # existence labels are image-level, so the classifier sees whole volumes
    vols, flags = [], []
    for _ in range(cfg.clf_batch_size):
        rec = clf_pool[next(sampler)]
        v = rec.volume
        if cfg.augment:
            v, _ = _augment(v, None, aug_rng)
        vols.append(v)
        flags.append(rec.existence)
    factor = 2 ** net_cfg.num_levels
    shape = [math.ceil(max(v.shape[i] for v in vols) / factor) * factor
             for i in range(3)]
    vols = [np.pad(v, [(0, t - s) for s, t in zip(v.shape, shape)])
            for v in vols]
    x = torch.from_numpy(np.stack(vols)).unsqueeze(1)
    t = torch.from_numpy(np.stack(flags))
    logits = model.classify_logits(x)
    return clf_loss(logits, t, weights, organs)


def _validate(model, net_cfg, val_records, foreground, organs) -> dict:
    """Full-volume validation: per-organ Dice and classifier balanced accuracy."""
    model.eval()
    out: dict = {}
    class_names = ("background",) + tuple(foreground)
    factor = 2 ** net_cfg.num_levels
    dice_lists: dict[str, list] = {o: [] for o in foreground}
    clf_pred: dict[str, list] = {o: [] for o in organs}
    clf_true: dict[str, list] = {o: [] for o in organs}

    for rec in val_records:
        existence = rec.existence if net_cfg.fusion_enabled else None
        if rec.labels is not None:
            window = [math.ceil(s / factor) * factor for s in rec.volume.shape]
            probs = evaluator.sliding_window_probs(
                model, rec.volume, window, existence=existence)
            pred = evaluator.argmax_labels(probs, class_names)
            gt = LabelMap(data=rec.labels, class_names=class_names)
            for organ in foreground:
                dice_lists[organ].append(evaluator.dice_score(pred, gt, organ))
        if net_cfg.has_classifier:
            p = evaluator.classify_volume(model, rec.volume)
            for j, organ in enumerate(organs):
                clf_pred[organ].append(
                    int(p[j] >= evaluator.CLASSIFIER_THRESHOLD))
                clf_true[organ].append(int(rec.record.existence.flags[organ]))

    organ_means = []
    for organ in foreground:
        if dice_lists[organ]:
            out[f"dice_{organ}"] = float(np.mean(dice_lists[organ]))
            organ_means.append(out[f"dice_{organ}"])
    if organ_means:
        out["mean_dice"] = float(np.mean(organ_means))

    if net_cfg.has_classifier and any(clf_true[o] for o in organs):
        baccs = []
        for organ in organs:
            m = evaluator.classification_metrics(clf_pred[organ],
                                                 clf_true[organ])
            if m["balanced_accuracy"] is not None:
                baccs.append(m["balanced_accuracy"])
            else:
                acc = np.mean([p == t for p, t in
                               zip(clf_pred[organ], clf_true[organ])])
                baccs.append(float(acc))
        out["balanced_accuracy"] = float(np.mean(baccs))
    return out


def _selection_score(val: dict, has_classifier: bool) -> float:
    parts = []
    if "mean_dice" in val:
        parts.append(val["mean_dice"])
    if has_classifier and "balanced_accuracy" in val:
        parts.append(val["balanced_accuracy"])
    return float(np.mean(parts)) if parts else 0.0
