"""Deterministic synthetic abdomen phantoms.

Each phantom is a noisy intensity volume containing a large "body"
ellipsoid of soft tissue and six axis-aligned ellipsoidal organs with
class-specific intensities. The gallbladder is always placed touching
the liver surface (gap under two voxels), so false positives near the
liver boundary resemble the clinically observed failure mode. Removable
organs can be "resected": their voxels revert to soft-tissue intensity
and background label, as after real surgery.

Everything is a pure function of ``(config, index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (
    CLASS_NAMES,
    ExistenceVector,
    LabelMap,
    Manifest,
    SampleRecord,
    Volume,
    save_labelmap,
    save_manifest,
    save_volume,
)

TISSUE_INTENSITY = 0.2


@dataclass(frozen=True)
class OrganSpec:
    """Geometry and intensity ranges for one ellipsoidal organ.

    Positions and semi-axes are fractions of the grid edge. When
    ``adjacent_to`` is set, ``center`` is ignored and the organ is placed
    against the named organ's surface along ``direction`` with a surface
    gap drawn from ``gap_voxels``.
    """

    center: tuple[float, float, float]
    center_jitter: float
    semi_axes: tuple[tuple[float, float], ...]  # (lo, hi) per axis
    intensity: float
    intensity_std: float = 0.02
    adjacent_to: Optional[str] = None
    direction: Optional[tuple[float, float, float]] = None
    gap_voxels: tuple[float, float] = (0.1, 0.8)


def default_organ_specs() -> dict[str, OrganSpec]:
    return {
        "liver": OrganSpec(
            center=(0.36, 0.42, 0.60), center_jitter=0.015,
            semi_axes=((0.13, 0.16), (0.12, 0.15), (0.12, 0.15)),
            intensity=0.60,
        ),
        "spleen": OrganSpec(
            center=(0.34, 0.42, 0.20), center_jitter=0.015,
            semi_axes=((0.06, 0.09),) * 3,
            intensity=0.85,
        ),
        "right_kidney": OrganSpec(
            center=(0.74, 0.68, 0.70), center_jitter=0.015,
            semi_axes=((0.055, 0.08),) * 3,
            intensity=1.00,
        ),
        "left_kidney": OrganSpec(
            center=(0.74, 0.68, 0.28), center_jitter=0.015,
            semi_axes=((0.055, 0.08),) * 3,
            intensity=1.10,
        ),
        "pancreas": OrganSpec(
            center=(0.64, 0.26, 0.42), center_jitter=0.015,
            semi_axes=((0.045, 0.06), (0.045, 0.06), (0.09, 0.13)),
            intensity=1.25,
        ),
        "gallbladder": OrganSpec(
            center=(0.0, 0.0, 0.0), center_jitter=0.0,
            semi_axes=((0.04, 0.06),) * 3,
            intensity=0.70,
            adjacent_to="liver",
            direction=(0.70, -0.45, 0.55),
        ),
    }


@dataclass(frozen=True)
class PhantomConfig:
    grid_size: int = 64
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    organ_specs: dict[str, OrganSpec] = field(default_factory=default_organ_specs)
    removable_organs: tuple[str, ...] = ("gallbladder",)
    resection_probability: float | dict[str, float] = 0.3
    noise_std: float = 0.1
    seed: int = 0
    body_semi_axes: tuple[float, float, float] = (0.48, 0.47, 0.47)

    def __post_init__(self):
        for organ, p in self.resection_probabilities().items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(
                    f"resection probability for {organ} must be in [0,1], got {p}"
                )
        for organ in self.removable_organs:
            if organ not in self.organ_specs:
                raise ValueError(f"removable organ '{organ}' has no spec")

    def resection_probabilities(self) -> dict[str, float]:
        if isinstance(self.resection_probability, dict):
            return {o: float(self.resection_probability.get(o, 0.0))
                    for o in self.removable_organs}
        return {o: float(self.resection_probability) for o in self.removable_organs}


def _ellipsoid_mask(shape, center, semi_axes):
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def _surface_radius(semi_axes, direction):
    # distance from ellipsoid center to its surface along a unit direction
    return 1.0 / math.sqrt(sum((direction[i] / semi_axes[i]) ** 2 for i in range(3)))


def _place_organs(cfg: PhantomConfig, rng) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Draw center/semi-axes (in voxels) for every organ, liver first."""
    g = cfg.grid_size
    placed: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    order = sorted(cfg.organ_specs, key=lambda o: cfg.organ_specs[o].adjacent_to is not None)
    for organ in order:
        spec = cfg.organ_specs[organ]
        semi = np.array([rng.uniform(lo, hi) * g for lo, hi in spec.semi_axes])
        if spec.adjacent_to is None:
            center = np.array([
                (c + rng.uniform(-spec.center_jitter, spec.center_jitter)) * g
                for c in spec.center
            ])
        else:
            host_center, host_semi = placed[spec.adjacent_to]
            u = np.array(spec.direction, dtype=float)
            u /= np.linalg.norm(u)
            gap = rng.uniform(*spec.gap_voxels)
            dist = _surface_radius(host_semi, u) + _surface_radius(semi, u) + gap
            center = host_center + u * dist
        placed[organ] = (center, semi)
    return placed


def generate_phantom(cfg: PhantomConfig, index: int):
    """Render phantom ``index`` -> (Volume, LabelMap, ExistenceVector)."""
    rng = np.random.default_rng([cfg.seed, index])
    g = cfg.grid_size
    probs = cfg.resection_probabilities()
    resected = {o: bool(rng.random() < probs[o]) for o in cfg.removable_organs}

    placed = _place_organs(cfg, rng)

    data = np.zeros((g, g, g), dtype=np.float32)
    labels = np.zeros((g, g, g), dtype=np.uint8)
    body = _ellipsoid_mask(
        (g, g, g),
        np.array([0.5 * g] * 3),
        np.array(cfg.body_semi_axes) * g,
    )
    data[body] = TISSUE_INTENSITY

    claimed = np.zeros_like(body)
    for organ in CLASS_NAMES[1:]:
        center, semi = placed[organ]
        lo = center - semi
        hi = center + semi
        if lo.min() < 0 or (hi >= g).any():
            raise ValueError(
                f"organ '{organ}' extends outside the grid "
                f"(center {center.round(1)}, semi-axes {semi.round(1)})"
            )
        mask = _ellipsoid_mask((g, g, g), center, semi)
        if (mask & claimed).any():
            raise ValueError(f"organ '{organ}' overlaps a previously placed organ")
        claimed |= mask
        spec = cfg.organ_specs[organ]
        data[mask] = rng.normal(spec.intensity, spec.intensity_std, int(mask.sum()))
        labels[mask] = CLASS_NAMES.index(organ)

    for organ, removed in resected.items():
        if removed:
            mask = labels == CLASS_NAMES.index(organ)
            data[mask] = rng.normal(TISSUE_INTENSITY, cfg.noise_std, int(mask.sum()))
            labels[mask] = 0

    data += rng.normal(0.0, cfg.noise_std, data.shape)

    volume = Volume(data=data.astype(np.float32), spacing=cfg.spacing,
                    id=f"p{index:04d}")
    labelmap = LabelMap(data=labels, class_names=CLASS_NAMES)
    existence = ExistenceVector(
        {o: 0 if resected[o] else 1 for o in cfg.removable_organs}
    )
    return volume, labelmap, existence


def generate_dataset(cfg: PhantomConfig, counts: dict[str, int],
                     voxel_labeled_fraction: float, out_dir) -> Manifest:
    """Write a phantom dataset (NIfTI files + manifest.json) under ``out_dir``.

    Exactly ``ceil(fraction * n)`` records per split carry label maps; the
    rest carry existence labels only. Returns the manifest.
    """
    for split, n in counts.items():
        if n <= 0:
            raise ValueError(f"counts[{split}] must be > 0, got {n}")
    if not 0.0 < voxel_labeled_fraction <= 1.0:
        raise ValueError(
            f"voxel_labeled_fraction must be in (0, 1], got {voxel_labeled_fraction}"
        )

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    split_rng = np.random.default_rng([cfg.seed, 0xD5])
    records = []
    index = 0
    for split in ("train", "val", "test"):
        n = counts.get(split, 0)
        if n == 0:
            continue
        n_labeled = math.ceil(voxel_labeled_fraction * n)
        labeled_idx = set(split_rng.permutation(n)[:n_labeled].tolist())
        for i in range(n):
            volume, labelmap, existence = generate_phantom(cfg, index)
            vol_path = f"images/{volume.id}.nii.gz"
            save_volume(volume, out_dir / vol_path)
            lab_path = None
            if i in labeled_idx:
                lab_path = f"labels/{volume.id}.nii.gz"
                save_labelmap(labelmap, out_dir / lab_path, spacing=cfg.spacing)
            records.append(SampleRecord(
                id=volume.id,
                volume_path=vol_path,
                labelmap_path=lab_path,
                existence=existence,
                split=split,
            ))
            index += 1

    manifest = Manifest(
        records=tuple(records),
        removable_organs=cfg.removable_organs,
        class_names=CLASS_NAMES,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
