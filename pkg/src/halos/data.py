"""Domain types, dataset manifests, and volume/label I/O.

A dataset is described by a JSON manifest::

    {
      "class_names": ["background", "liver", ...],
      "removable_organs": ["gallbladder"],
      "records": [
        {"id": "...", "volume": "vol.nii.gz", "labelmap": "lab.nii.gz" | null,
         "existence": {"gallbladder": 1}, "split": "train"},
        ...
      ]
    }

Paths are relative to the manifest's directory. Records without a
labelmap carry image-level existence labels only. All types are
immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nifti

CLASS_NAMES = (
    "background",
    "liver",
    "spleen",
    "right_kidney",
    "left_kidney",
    "pancreas",
    "gallbladder",
)
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised when a manifest violates the documented schema."""


@dataclass(frozen=True)
class Volume:
    """3D scalar intensity grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got {self.data.ndim}D")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """3D integer class grid; index 0 is background."""

    data: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"labelmap data must be 3D, got {self.data.ndim}D")
        vmax = int(self.data.max()) if self.data.size else 0
        if self.data.min() < 0 or vmax >= len(self.class_names):
            raise ValueError(
                f"labels must lie in [0, {len(self.class_names)}), "
                f"found range [{self.data.min()}, {vmax}]"
            )

    @property
    def shape(self):
        return self.data.shape

    def voxel_count(self, organ: str) -> int:
        return int(np.count_nonzero(self.data == self.class_names.index(organ)))


@dataclass(frozen=True)
class ExistenceVector:
    """Per-removable-organ presence flags (1 = organ present)."""

    flags: dict[str, int]

    def __post_init__(self):
        for organ, v in self.flags.items():
            if v not in (0, 1):
                raise ValueError(f"existence flag for {organ} must be 0/1, got {v}")

    @property
    def organs(self) -> tuple[str, ...]:
        return tuple(self.flags)

    def as_array(self) -> np.ndarray:
        return np.array([self.flags[o] for o in self.flags], dtype=np.float32)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    volume_path: str
    existence: ExistenceVector
    split: str
    labelmap_path: Optional[str] = None

    @property
    def voxel_labeled(self) -> bool:
        return self.labelmap_path is not None


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    removable_organs: tuple[str, ...]
    class_names: tuple[str, ...]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def volume_file(self, rec: SampleRecord) -> Path:
        return self.root / rec.volume_path

    def labelmap_file(self, rec: SampleRecord) -> Path:
        return self.root / rec.labelmap_path


def load_volume(path) -> Volume:
    """Read a 3D NIfTI volume, validating the loaded intensities."""
    data, spacing = nifti.read(path)
    if data.ndim != 3:
        raise nifti.NiftiError(f"expected 3D data in {path}, got {data.ndim}D")
    data = np.ascontiguousarray(data, dtype=np.float32)
    bad = ~np.isfinite(data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise nifti.NiftiError(f"non-finite voxel at index {idx} in {path}")
    return Volume(data=data, spacing=spacing, id=Path(path).name.split(".")[0])


def save_volume(v: Volume, path) -> None:
    nifti.write(path, v.data.astype(np.float32), v.spacing)


def load_labelmap(path, class_names=CLASS_NAMES) -> LabelMap:
    data, _ = nifti.read(path)
    if data.ndim != 3:
        raise nifti.NiftiError(f"expected 3D labels in {path}, got {data.ndim}D")
    return LabelMap(data=np.ascontiguousarray(data, dtype=np.uint8),
                    class_names=tuple(class_names))


def save_labelmap(l: LabelMap, path, spacing=(1.0, 1.0, 1.0)) -> None:
    nifti.write(path, l.data.astype(np.uint8), spacing)


def derive_existence(labelmap: LabelMap, removable_organs) -> ExistenceVector:
    """Existence flags implied by a label map's voxel counts."""
    return ExistenceVector(
        {o: int(labelmap.voxel_count(o) > 0) for o in removable_organs}
    )


def znormalize(data: np.ndarray) -> np.ndarray:
    """Per-volume z-score over nonzero voxels, the training-time normalization."""
    mask = data != 0
    if not mask.any():
        return np.zeros_like(data, dtype=np.float32)
    vals = data[mask]
    std = vals.std()
    if std == 0:
        std = 1.0
    out = (data - vals.mean()) / std
    return out.astype(np.float32)


def one_hot(l: LabelMap, num_classes: int) -> np.ndarray:
    """Per-class binary indicator of shape (num_classes, D, H, W)."""
    vmax = int(l.data.max()) if l.data.size else 0
    if num_classes <= vmax:
        raise ValueError(f"num_classes={num_classes} but labels reach {vmax}")
    out = np.zeros((num_classes,) + l.data.shape, dtype=np.float32)
    for c in range(num_classes):
        out[c] = l.data == c
    return out


def _require(cond, msg):
    if not cond:
        raise ManifestError(msg)


def load_manifest(path, validate_labels: bool = True) -> Manifest:
    """Load and eagerly validate a JSON dataset manifest.

    With ``validate_labels`` every voxel-labeled record's label map is
    opened and its organ voxel counts are checked against the stored
    existence flags.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest is not valid JSON: {e}") from e

    for key in ("class_names", "removable_organs", "records"):
        _require(key in doc, f"manifest missing key '{key}'")
    class_names = tuple(doc["class_names"])
    removable = tuple(doc["removable_organs"])
    _require(len(class_names) >= 2, "class_names must list background plus organs")
    _require(class_names[0] == "background", "class_names[0] must be 'background'")
    for o in removable:
        _require(o in class_names, f"removable organ '{o}' not in class_names")
    _require(len(doc["records"]) > 0, "empty manifest")

    root = path.parent
    records = []
    ids_by_split: dict[str, set] = {s: set() for s in SPLITS}
    for i, rec in enumerate(doc["records"]):
        for key in ("id", "volume", "existence", "split"):
            _require(key in rec, f"record {i} missing key '{key}'")
        _require(rec["split"] in SPLITS,
                 f"record {rec['id']}: unknown split '{rec['split']}'")
        ex = rec["existence"]
        _require(set(ex) == set(removable),
                 f"record {rec['id']}: existence keys {sorted(ex)} != "
                 f"removable organs {sorted(removable)}")
        for o, v in ex.items():
            _require(v in (0, 1),
                     f"record {rec['id']}: existence[{o}] must be 0/1, got {v}")
        existence = ExistenceVector({o: int(ex[o]) for o in removable})
        records.append(SampleRecord(
            id=rec["id"],
            volume_path=rec["volume"],
            labelmap_path=rec.get("labelmap"),
            existence=existence,
            split=rec["split"],
        ))
        ids_by_split[rec["split"]].add(rec["id"])

    for a in SPLITS:
        for b in SPLITS:
            if a < b:
                dup = ids_by_split[a] & ids_by_split[b]
                _require(not dup,
                         f"subject(s) {sorted(dup)} appear in both '{a}' and '{b}'")

    manifest = Manifest(records=tuple(records), removable_organs=removable,
                        class_names=class_names, root=root)

    if validate_labels:
        for rec in manifest.records:
            if not rec.voxel_labeled:
                continue
            lm = load_labelmap(manifest.labelmap_file(rec), class_names)
            derived = derive_existence(lm, removable)
            if derived.flags != rec.existence.flags:
                raise ManifestError(
                    f"record {rec.id}: existence flags {rec.existence.flags} "
                    f"inconsistent with label map counts "
                    f"{ {o: lm.voxel_count(o) for o in removable} }"
                )
    return manifest


def save_manifest(manifest: Manifest, path) -> None:
    doc = {
        "class_names": list(manifest.class_names),
        "removable_organs": list(manifest.removable_organs),
        "records": [
            {
                "id": r.id,
                "volume": r.volume_path,
                "labelmap": r.labelmap_path,
                "existence": dict(r.existence.flags),
                "split": r.split,
            }
            for r in manifest.records
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
