"""Multi-task 3D segmentation network with existence-conditioned decoding.

A 3D U-Net (two conv+norm+leaky-ReLU units per stage, strided-conv
downsampling, transpose-conv upsampling, channels doubling up to a cap
of 320) with:

* an optional existence classifier sharing the encoder, attached after a
  configurable encoder block (or at the full-resolution decoder output
  for the decoder-classifier baseline);
* optional fusion modules that re-scale and shift decoder feature maps
  channel-wise from pooled feature statistics concatenated with the
  per-organ existence flags. One fusion site sits at the bottleneck and
  one before each decoder block. At initialization every fusion site is
  the identity (scale 1, offset 0), so an untrained fused model matches
  the plain network exactly.

Checkpoints are plain zip archives of named float arrays plus a JSON
metadata entry, readable without this package (see README).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

LEAKY_SLOPE = 0.01
CHANNEL_CAP = 320

CLASSIFIER_LOCATIONS = ("none", "encoder", "decoder")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 7
    base_channels: int = 32
    num_levels: int = 5
    norm: str = "instance"
    classifier_location: str = "encoder"
    classifier_block: int = 4
    fusion_enabled: bool = True
    fusion_hidden_reduction: int = 4
    deep_supervision: bool = True
    num_removable_organs: int = 1

    def __post_init__(self):
        if self.num_levels < 2:
            raise ValueError(f"num_levels must be >= 2, got {self.num_levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.norm not in ("instance", "batch"):
            raise ValueError(f"norm must be 'instance' or 'batch', got '{self.norm}'")
        if self.classifier_location not in CLASSIFIER_LOCATIONS:
            raise ValueError(f"classifier_location must be one of "
                             f"{CLASSIFIER_LOCATIONS}, got '{self.classifier_location}'")
        if self.classifier_location == "encoder" and not (
                1 <= self.classifier_block <= self.num_levels):
            raise ValueError(f"classifier_block must lie in [1, {self.num_levels}], "
                             f"got {self.classifier_block}")
        if self.fusion_enabled and self.num_removable_organs < 1:
            raise ValueError("fusion requires num_removable_organs >= 1")

    @property
    def has_classifier(self) -> bool:
        return self.classifier_location != "none"

    def stage_channels(self) -> list[int]:
        """Channels per resolution stage, stage 0 = full res, last = bottleneck."""
        return [min(self.base_channels * 2 ** s, CHANNEL_CAP)
                for s in range(self.num_levels + 1)]


@dataclass
class ModelOutput:
    """Full-resolution logits, per-scale supervision logits, existence logits."""

    logits: torch.Tensor
    deep_supervision_logits: Optional[list[torch.Tensor]] = None
    existence_logits: Optional[torch.Tensor] = None


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    return nn.BatchNorm3d(channels)


class ConvBlock(nn.Module):
    """conv3x3x3 -> norm -> leaky ReLU."""

    def __init__(self, in_ch: int, out_ch: int, norm: str, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
        self.norm = _norm_layer(norm, out_ch)
        self.act = nn.LeakyReLU(LEAKY_SLOPE, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ConvStage(nn.Module):
    """Two conv blocks; the first may downsample with stride 2."""

    def __init__(self, in_ch: int, out_ch: int, norm: str, stride: int = 1):
        super().__init__()
        self.block1 = ConvBlock(in_ch, out_ch, norm, stride=stride)
        self.block2 = ConvBlock(out_ch, out_ch, norm)

    def forward(self, x):
        return self.block2(self.block1(x))


class FusionModule(nn.Module):
    """Channel-wise affine conditioning of a feature map on auxiliary flags.

    A two-layer MLP maps [global-average-pooled channels ++ existence flags]
    to a scale and offset per channel. The final layer starts at zero
    weights with bias (1...1, 0...0), i.e. the identity transform.
    """

    def __init__(self, channels: int, aux_dim: int, hidden_reduction: int = 4):
        super().__init__()
        self.channels = channels
        hidden = max(channels // hidden_reduction, 1)
        self.fc1 = nn.Linear(channels + aux_dim, hidden)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.fc2 = nn.Linear(hidden, 2 * channels)
        nn.init.zeros_(self.fc2.weight)
        with torch.no_grad():
            self.fc2.bias.copy_(torch.cat([torch.ones(channels),
                                           torch.zeros(channels)]))

    def scale_offset(self, feature_map: torch.Tensor, aux: torch.Tensor):
        pooled = feature_map.mean(dim=(2, 3, 4))
        h = torch.cat([pooled, aux.to(feature_map.dtype)], dim=1)
        out = self.fc2(self.act(self.fc1(h)))
        return out[:, : self.channels], out[:, self.channels:]

    def forward(self, feature_map: torch.Tensor, aux: torch.Tensor):
        alpha, beta = self.scale_offset(feature_map, aux)
        alpha = alpha[:, :, None, None, None]
        beta = beta[:, :, None, None, None]
        return alpha * feature_map + beta


def daft_transform(feature_map: torch.Tensor, existence_input: torch.Tensor,
                   module: FusionModule) -> torch.Tensor:
    """Apply one fusion module to a (B, C, D, H, W) feature map."""
    if feature_map.ndim != 5:
        raise ValueError(f"expected 5D feature map, got {feature_map.ndim}D")
    if feature_map.shape[1] != module.channels:
        raise ValueError(f"feature map has {feature_map.shape[1]} channels, "
                         f"module expects {module.channels}")
    if existence_input.ndim != 2 or existence_input.shape[0] != feature_map.shape[0]:
        raise ValueError("existence input must be (batch, num_organs)")
    return module(feature_map, existence_input)


class ClassifierHead(nn.Module):
    """Encoder-style conv block, global average pooling, linear layer."""

    def __init__(self, in_ch: int, num_organs: int, norm: str):
        super().__init__()
        self.block = ConvBlock(in_ch, in_ch, norm)
        self.fc = nn.Linear(in_ch, num_organs)
        # zero logits at init: every probability starts at exactly 0.5
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        h = self.block(x).mean(dim=(2, 3, 4))
        return self.fc(h)


class HalosNet(nn.Module):
    """U-Net with optional existence classifier and decoder fusion sites."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels()

        self.encoder_stages = nn.ModuleList(
            [ConvStage(cfg.in_channels, ch[0], cfg.norm)]
            + [ConvStage(ch[s - 1], ch[s], cfg.norm, stride=2)
               for s in range(1, cfg.num_levels + 1)]
        )
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose3d(ch[s], ch[s - 1], kernel_size=2, stride=2)
             for s in range(cfg.num_levels, 0, -1)]
        )
        self.decoder_stages = nn.ModuleList(
            [ConvStage(2 * ch[s - 1], ch[s - 1], cfg.norm)
             for s in range(cfg.num_levels, 0, -1)]
        )
        self.seg_heads = nn.ModuleList(
            [nn.Conv3d(ch[s - 1], cfg.num_classes, kernel_size=1)
             for s in range(cfg.num_levels, 0, -1)]
        )

        if cfg.fusion_enabled:
            sites = [FusionModule(ch[cfg.num_levels], cfg.num_removable_organs,
                                  cfg.fusion_hidden_reduction)]
            sites += [FusionModule(2 * ch[s - 1], cfg.num_removable_organs,
                                   cfg.fusion_hidden_reduction)
                      for s in range(cfg.num_levels, 0, -1)]
            self.fusions = nn.ModuleList(sites)
        else:
            self.fusions = None

        if cfg.classifier_location == "encoder":
            self.classifier = ClassifierHead(ch[cfg.classifier_block],
                                             cfg.num_removable_organs, cfg.norm)
        elif cfg.classifier_location == "decoder":
            self.classifier = ClassifierHead(ch[0], cfg.num_removable_organs,
                                             cfg.norm)
        else:
            self.classifier = None

        self.apply(_init_conv)

    # -- forward ---------------------------------------------------------

    def _check_input(self, x: torch.Tensor, existence: Optional[torch.Tensor]):
        if x.ndim != 5:
            raise ValueError(f"expected (B, C, D, H, W) input, got {x.ndim}D")
        factor = 2 ** self.cfg.num_levels
        if any(s % factor for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be "
                             f"divisible by {factor}")
        if self.cfg.fusion_enabled and existence is None:
            raise ValueError("fusion is enabled: existence input required")
        if not self.cfg.fusion_enabled and existence is not None:
            raise ValueError("fusion is disabled: unexpected existence input")
        if existence is not None and (
                existence.ndim != 2
                or existence.shape[0] != x.shape[0]
                or existence.shape[1] != self.cfg.num_removable_organs):
            raise ValueError(f"existence input must be "
                             f"(B, {self.cfg.num_removable_organs})")

    def forward(self, x: torch.Tensor,
                existence: Optional[torch.Tensor] = None) -> ModelOutput:
        self._check_input(x, existence)
        cfg = self.cfg

        skips = []
        h = x
        existence_logits = None
        for s, stage in enumerate(self.encoder_stages):
            h = stage(h)
            skips.append(h)
            if cfg.classifier_location == "encoder" and s == cfg.classifier_block:
                existence_logits = self.classifier(h)

        if self.fusions is not None:
            h = self.fusions[0](h, existence)

        feats = []
        for i in range(cfg.num_levels):
            h = self.upsamplers[i](h)
            h = torch.cat([h, skips[cfg.num_levels - 1 - i]], dim=1)
            if self.fusions is not None:
                h = self.fusions[i + 1](h, existence)
            h = self.decoder_stages[i](h)
            feats.append(h)

        if cfg.classifier_location == "decoder":
            existence_logits = self.classifier(h)

        logits = self.seg_heads[-1](feats[-1])
        if cfg.deep_supervision:
            # full resolution first; the lowest decoder scale is not supervised
            supervised = [logits] + [self.seg_heads[i](feats[i])
                                     for i in range(cfg.num_levels - 2, 0, -1)]
        else:
            supervised = None
        return ModelOutput(logits=logits, deep_supervision_logits=supervised,
                           existence_logits=existence_logits)

    def classify_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Existence logits, one column per removable organ."""
        if self.classifier is None:
            raise ValueError("model has no classifier head")
        cfg = self.cfg
        if cfg.classifier_location == "encoder":
            if x.ndim != 5:
                raise ValueError(f"expected (B, C, D, H, W) input, got {x.ndim}D")
            h = x
            for s in range(cfg.classifier_block + 1):
                h = self.encoder_stages[s](h)
            return self.classifier(h)
        if cfg.fusion_enabled:
            raise ValueError("decoder classifier cannot drive its own fusion")
        return self.forward(x).existence_logits

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        """Existence probabilities in [0, 1], one column per removable organ."""
        return torch.sigmoid(self.classify_logits(x))


def _init_conv(m):
    if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
        nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def build_model(cfg: NetworkConfig) -> HalosNet:
    """Construct the full fused multi-task network for ``cfg``."""
    return HalosNet(cfg)


BASELINE_KINDS = ("plain", "decoder_classifier")


def build_baseline(kind: str, cfg: NetworkConfig = NetworkConfig()) -> HalosNet:
    """Baseline variants sharing the U-Net trunk.

    ``plain`` drops both the classifier and the fusion sites;
    ``decoder_classifier`` attaches the classifier to the full-resolution
    decoder output and drops fusion.
    """
    from dataclasses import replace

    if kind == "plain":
        return HalosNet(replace(cfg, fusion_enabled=False,
                                classifier_location="none"))
    if kind == "decoder_classifier":
        return HalosNet(replace(cfg, fusion_enabled=False,
                                classifier_location="decoder"))
    raise ValueError(f"unknown baseline kind '{kind}' (choose from {BASELINE_KINDS})")


# -- checkpoint archive ---------------------------------------------------

CHECKPOINT_FORMAT = "halos-checkpoint-v1"


def save_checkpoint(path, model: HalosNet, optimizer: Optional[torch.optim.Optimizer] = None,
                    meta: Optional[dict] = None) -> None:
    """Write a self-describing archive: JSON metadata + named float arrays.

    Layout: a zip file with ``meta.json`` (format tag, network config,
    caller metadata, array index) and one ``.npy`` entry per model weight
    (``param/<name>``) and optimizer slot (``opt/<index>/<name>``).
    """
    entries: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        entries[f"param/{name}"] = tensor.detach().cpu().numpy()

    opt_meta = None
    if optimizer is not None:
        opt_meta = {"param_groups": []}
        state = optimizer.state_dict()
        for g in state["param_groups"]:
            opt_meta["param_groups"].append(
                {k: v for k, v in g.items() if k != "params"})
        for idx, slots in state["state"].items():
            for slot, value in slots.items():
                if isinstance(value, torch.Tensor):
                    entries[f"opt/{idx}/{slot}"] = value.detach().cpu().numpy()
                else:
                    opt_meta.setdefault("scalars", {})[f"{idx}/{slot}"] = value

    doc = {
        "format": CHECKPOINT_FORMAT,
        "network": asdict(model.cfg),
        "optimizer": opt_meta,
        "meta": meta or {},
        "arrays": sorted(entries),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(doc, indent=2, sort_keys=True))
        for name in sorted(entries):
            buf = io.BytesIO()
            np.save(buf, entries[name])
            zf.writestr(name + ".npy", buf.getvalue())


class Checkpoint:
    """Loaded checkpoint archive."""

    def __init__(self, network_config: NetworkConfig, arrays: dict,
                 optimizer_meta: Optional[dict], meta: dict):
        self.network_config = network_config
        self.arrays = arrays
        self.optimizer_meta = optimizer_meta
        self.meta = meta

    def build_model(self) -> HalosNet:
        model = HalosNet(self.network_config)
        state = {name[len("param/"):]: torch.from_numpy(arr.copy())
                 for name, arr in self.arrays.items()
                 if name.startswith("param/")}
        model.load_state_dict(state)
        return model

    def load_optimizer(self, optimizer: torch.optim.Optimizer) -> None:
        if self.optimizer_meta is None:
            raise ValueError("checkpoint holds no optimizer state")
        state = optimizer.state_dict()
        for g, saved in zip(state["param_groups"],
                            self.optimizer_meta["param_groups"]):
            g.update(saved)
        opt_state: dict[int, dict] = {}
        for name, arr in self.arrays.items():
            if not name.startswith("opt/"):
                continue
            _, idx, slot = name.split("/", 2)
            opt_state.setdefault(int(idx), {})[slot] = torch.from_numpy(arr.copy())
        for key, value in (self.optimizer_meta.get("scalars") or {}).items():
            idx, slot = key.split("/", 1)
            opt_state.setdefault(int(idx), {})[slot] = value
        state["state"] = opt_state
        optimizer.load_state_dict(state)


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        doc = json.loads(zf.read("meta.json"))
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a recognized checkpoint: {path}")
        arrays = {}
        for name in doc["arrays"]:
            with zf.open(name + ".npy") as f:
                arrays[name] = np.load(f)
    return Checkpoint(
        network_config=NetworkConfig(**doc["network"]),
        arrays=arrays,
        optimizer_meta=doc.get("optimizer"),
        meta=doc.get("meta", {}),
    )
