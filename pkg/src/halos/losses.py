"""Training objectives.

Soft Dice with the smoothing term added to numerator *and* denominator
(so a class that is empty in both prediction and truth contributes a
loss of 0, not 1), voxel cross-entropy with optional per-image dynamic
class weights, deep-supervision aggregation across decoder scales,
ratio-weighted existence cross-entropy, and the convex combination of
the two task losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


class ClassBalanceError(ValueError):
    """Raised when class-ratio weights cannot be computed."""


@dataclass(frozen=True)
class DiceConfig:
    epsilon: float = 1.0
    batch_reduction: bool = True
    include_background: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class LossWeights:
    """Segmentation-loss weight and per-organ existence CE class weights.

    ``clf_class_weights`` maps organ -> (absent_weight, present_weight).
    """

    alpha: float = 0.5
    clf_class_weights: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        for organ, (w0, w1) in self.clf_class_weights.items():
            if w0 <= 0 or w1 <= 0:
                raise ValueError(f"class weights for {organ} must be positive")


def existence_class_weights(manifest, split: str = "train") -> dict[str, tuple[float, float]]:
    """Absent/present CE weights from the class ratio of a manifest split.

    The absent class is upweighted by present_count / absent_count so both
    classes carry equal total mass.
    """
    records = manifest.split(split)
    weights = {}
    for organ in manifest.removable_organs:
        present = sum(r.existence.flags[organ] for r in records)
        absent = len(records) - present
        if absent == 0 or present == 0:
            raise ClassBalanceError(
                f"split '{split}' has {present} present / {absent} absent "
                f"samples for '{organ}'; existence classification needs both "
                f"classes (add resected/intact cases or disable the classifier)"
            )
        weights[organ] = (present / absent, 1.0)
    return weights


def dice_loss(pred_soft: torch.Tensor, target: torch.Tensor,
              cfg: DiceConfig = DiceConfig()) -> torch.Tensor:
    """Soft Dice loss over (B, C, D, H, W) probabilities and one-hot targets."""
    if pred_soft.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_soft.shape)} vs "
                         f"{tuple(target.shape)}")
    if pred_soft.min() < 0:
        raise ValueError("predicted probabilities must be non-negative")

    axes = tuple(range(2, pred_soft.ndim))
    if cfg.batch_reduction:
        axes = (0,) + axes
    intersection = (pred_soft * target).sum(dim=axes)
    denominator = pred_soft.sum(dim=axes) + target.sum(dim=axes)
    per_class = 1.0 - (2.0 * intersection + cfg.epsilon) / (denominator + cfg.epsilon)
    if not cfg.include_background:
        per_class = per_class[..., 1:] if cfg.batch_reduction else per_class[:, 1:]
    return per_class.mean()


def _dynamic_class_weights(labels: torch.Tensor, num_classes: int,
                           clip: tuple[float, float] = (0.1, 10.0)) -> torch.Tensor:
    """Inverse-frequency weights for one image; absent classes get 0.

    Normalized so the expected per-voxel weight is 1: w_c = 1 / (k * f_c)
    with k the number of present classes and f_c the class frequency.
    """
    counts = torch.bincount(labels.reshape(-1), minlength=num_classes).double()
    total = counts.sum()
    present = counts > 0
    k = int(present.sum())
    weights = torch.zeros(num_classes, dtype=torch.double, device=labels.device)
    weights[present] = total / (k * counts[present])
    weights[present] = weights[present].clamp(*clip)
    return weights


def cross_entropy_loss(pred_logits: torch.Tensor, target: torch.Tensor,
                       dynamic_weights: bool = False) -> torch.Tensor:
    """Voxel-averaged cross-entropy over (B, C, *spatial) logits.

    With ``dynamic_weights`` each image is weighted by its own inverse
    class frequencies (clipped to [0.1, 10]), keeping rare organs from
    being drowned out by background.
    """
    if pred_logits.shape[0] != target.shape[0] or pred_logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"shape mismatch: {tuple(pred_logits.shape)} vs "
                         f"{tuple(target.shape)}")
    if not dynamic_weights:
        return F.cross_entropy(pred_logits, target)

    num_classes = pred_logits.shape[1]
    logp = F.log_softmax(pred_logits, dim=1)
    losses = []
    for b in range(pred_logits.shape[0]):
        w = _dynamic_class_weights(target[b], num_classes).to(pred_logits.dtype)
        nll = -logp[b].gather(0, target[b].unsqueeze(0)).squeeze(0)
        losses.append((w[target[b]] * nll).mean())
    return torch.stack(losses).mean()


def deep_supervision_weights(num_scales: int) -> list[float]:
    """Halving weights per scale, normalized to sum to 1 (k=0 full res)."""
    raw = [2.0 ** (-k) for k in range(num_scales)]
    s = sum(raw)
    return [w / s for w in raw]


def downsample_labels(target: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbor downsampling of hard labels to ``size``."""
    if tuple(target.shape[1:]) == tuple(size):
        return target
    out = F.interpolate(target.unsqueeze(1).float(), size=tuple(size), mode="nearest")
    return out.squeeze(1).long()


def seg_loss(output, target: torch.Tensor, dice_cfg: DiceConfig = DiceConfig(),
             dynamic_ce_weights: bool = True) -> torch.Tensor:
    """Cross-entropy + Dice, aggregated over deep-supervision scales.

    ``output`` is a ModelOutput; ``target`` holds hard labels (B, D, H, W).
    Lower-resolution targets are produced by nearest-neighbor downsampling.
    """
    scales = output.deep_supervision_logits
    if scales is None:
        scales = [output.logits]
    weights = deep_supervision_weights(len(scales))
    num_classes = output.logits.shape[1]

    total = None
    for w, logits in zip(weights, scales):
        t = downsample_labels(target, logits.shape[2:])
        ce = cross_entropy_loss(logits, t, dynamic_weights=dynamic_ce_weights)
        onehot = F.one_hot(t, num_classes).permute(0, 4, 1, 2, 3).to(logits.dtype)
        dc = dice_loss(torch.softmax(logits, dim=1), onehot, dice_cfg)
        term = w * (ce + dc)
        total = term if total is None else total + term
    return total


def clf_loss(existence_logits: torch.Tensor, target: torch.Tensor,
             weights: LossWeights, organs) -> torch.Tensor:
    """Class-ratio-weighted binary cross-entropy, averaged over organs and batch.

    ``existence_logits`` and ``target`` are (B, num_organs); ``organs`` names
    the columns, matching keys of ``weights.clf_class_weights``.
    """
    if existence_logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(existence_logits.shape)} vs "
                         f"{tuple(target.shape)}")
    if existence_logits.shape[1] != len(organs):
        raise ValueError(f"{existence_logits.shape[1]} logit columns for "
                         f"{len(organs)} organs")
    ce = F.binary_cross_entropy_with_logits(existence_logits, target,
                                            reduction="none")
    w = torch.empty_like(ce)
    for j, organ in enumerate(organs):
        w_absent, w_present = weights.clf_class_weights.get(organ, (1.0, 1.0))
        w[:, j] = torch.where(target[:, j] > 0.5,
                              torch.as_tensor(w_present, dtype=ce.dtype),
                              torch.as_tensor(w_absent, dtype=ce.dtype))
    return (w * ce).mean()


def combined_loss(l_seg, l_clf, alpha: float):
    """alpha * L_seg + (1 - alpha) * L_clf."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    return alpha * l_seg + (1.0 - alpha) * l_clf
