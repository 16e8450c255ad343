"""Feature assembly and fusion heads.

The four per-exam feature vectors (two views x two scales) are laid out in
fixed slot order [seg_cc, seg_mlo, crop_cc, crop_mlo]; a missing view
contributes exact zero vectors in both of its slots. Fusion is either an
elementwise max over the four slots or a small convolutional block over
the 4 x D stack, followed by the MLP classification head producing one
raw logit per exam.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig, init_parameters
from .data import BreastExam
from .errors import DimMismatch, NoViews
from .prep import ImagePlane, Scale, View

SLOTS = ("seg_cc", "seg_mlo", "crop_cc", "crop_mlo")


class FusionStrategy(str, Enum):
    MAXPOOL = "maxpool"
    CONV = "conv"


@dataclass(frozen=True)
class FusionConfig:
    strategy: FusionStrategy = FusionStrategy.MAXPOOL
    feature_dim: int = 1024
    hidden: int = 512
    dropout_rate: float = 0.3
    leaky_slope: float = 0.01
    conv_out_channels: int = 4
    conv_kernel: int = 3
    conv_padding: int = 1
    pool: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", FusionStrategy(self.strategy))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def conv_flatten_dim(self) -> int:
        # 4 slots and D columns each halved by the 2x2 pool
        return (4 // self.pool) * (self.feature_dim // self.pool) * self.conv_out_channels

    @property
    def head_in_dim(self) -> int:
        return self.feature_dim if self.strategy == FusionStrategy.MAXPOOL else self.conv_flatten_dim


@dataclass
class FeatureBundle:
    """The four D-length feature vectors of one exam plus its view presence."""

    f_seg_cc: torch.Tensor
    f_seg_mlo: torch.Tensor
    f_crop_cc: torch.Tensor
    f_crop_mlo: torch.Tensor
    present: dict[View, bool]

    def stack(self) -> torch.Tensor:
        """(4, D) in slot order."""
        return torch.stack([self.f_seg_cc, self.f_seg_mlo, self.f_crop_cc, self.f_crop_mlo])


def plane_tensor(plane: ImagePlane, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(plane.pixels).to(dtype).reshape(1, plane.side, plane.side)


def build_bundle(
    planes: Mapping[View, tuple[ImagePlane, ImagePlane]],
    seg_backbone: Backbone,
    crop_backbone: Backbone,
) -> FeatureBundle:
    """Extract the four features for one exam, zero-padding absent views.

    `planes` maps each present view to its (masked, cropped) pair; the
    masked plane goes through the segmented-scale instance and the cropped
    plane through the cropped-scale instance.
    """
    if not planes:
        raise NoViews("cannot build a feature bundle without any view")
    dtype = next(seg_backbone.parameters()).dtype
    D = seg_backbone.cfg.feature_dim
    vecs = {slot: torch.zeros(D, dtype=dtype) for slot in SLOTS}
    for view, (masked, cropped) in planes.items():
        key = "cc" if view == View.CC else "mlo"
        vecs[f"seg_{key}"] = seg_backbone(plane_tensor(masked, dtype).unsqueeze(0))[0]
        vecs[f"crop_{key}"] = crop_backbone(plane_tensor(cropped, dtype).unsqueeze(0))[0]
    return FeatureBundle(
        f_seg_cc=vecs["seg_cc"],
        f_seg_mlo=vecs["seg_mlo"],
        f_crop_cc=vecs["crop_cc"],
        f_crop_mlo=vecs["crop_mlo"],
        present={v: v in planes for v in View},
    )


def fuse_maxpool(bundle: FeatureBundle) -> torch.Tensor:
    """Elementwise maximum across the four slots; returns (D,)."""
    return bundle.stack().amax(dim=0)


def fuse_conv(bundle: FeatureBundle, block: "ConvFusion") -> torch.Tensor:
    """Convolutional fusion of one bundle; returns the flattened (4096,) vector."""
    return block(bundle.stack().unsqueeze(0))[0]


def dropout(x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout with an explicit random stream; identity when not training."""
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


class ConvFusion(nn.Module):
    """Conv 3x3 over the (4, D) stack -> batch norm -> ReLU -> 2x2 max pool -> flatten."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv2d(
            1, cfg.conv_out_channels, cfg.conv_kernel, stride=1, padding=cfg.conv_padding
        )
        self.norm = nn.BatchNorm2d(cfg.conv_out_channels, eps=1e-5, momentum=0.1)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        """stack: (B, 4, D) -> (B, conv_flatten_dim)."""
        x = stack.unsqueeze(1)  # (B, 1, 4, D)
        x = F.relu(self.norm(self.conv(x)))
        x = F.max_pool2d(x, self.cfg.pool)
        return x.flatten(1)


class MlpHead(nn.Module):
    """Classification head: optional width adapter, then D -> hidden -> 1.

    The fused vector passes Linear(in -> D) only when in != D, then
    Linear(D -> hidden) -> LeakyReLU -> Dropout -> Linear(hidden -> 1),
    returning a raw logit (no sigmoid).
    """

    def __init__(self, in_dim: int, cfg: FusionConfig):
        super().__init__()
        self.in_dim = in_dim
        self.cfg = cfg
        D = cfg.feature_dim
        self.pre = nn.Linear(in_dim, D) if in_dim != D else None
        self.fc1 = nn.Linear(D, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, 1)

    def forward(
        self,
        x: torch.Tensor,
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """x: (B, in_dim) -> (B,) logits."""
        if x.shape[-1] != self.in_dim:
            raise DimMismatch(f"head expects {self.in_dim} inputs, got {x.shape[-1]}")
        if self.pre is not None:
            x = self.pre(x)
        x = F.leaky_relu(self.fc1(x), negative_slope=self.cfg.leaky_slope)
        x = dropout(x, self.cfg.dropout_rate, training, generator)
        return self.fc2(x).squeeze(-1)


class MsmvModel(nn.Module):
    """Dual backbones + fusion + head; one raw logit per exam.

    The two backbone instances are initialized independently from
    seed-derived streams. Dropout draws come from an internal generator
    unless the caller passes an explicit one.
    """

    def __init__(self, backbone_cfg: BackboneConfig, fusion_cfg: FusionConfig, seed: int = 0):
        super().__init__()
        if fusion_cfg.feature_dim != backbone_cfg.feature_dim:
            raise ValueError("fusion feature_dim must match backbone feature_dim")
        self.backbone_cfg = backbone_cfg
        self.fusion_cfg = fusion_cfg
        self.seed = seed
        self.seg_backbone = Backbone(backbone_cfg, seed=seed)
        self.crop_backbone = Backbone(backbone_cfg, seed=seed + 1)
        self.conv_fusion = (
            ConvFusion(fusion_cfg) if fusion_cfg.strategy == FusionStrategy.CONV else None
        )
        self.head = MlpHead(fusion_cfg.head_in_dim, fusion_cfg)
        g = torch.Generator().manual_seed(seed + 2)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith(("head.", "conv_fusion.")):
                    if "norm" in name:
                        p.fill_(1.0) if name.endswith("weight") else p.zero_()
                    elif name.endswith("bias"):
                        p.zero_()
                    else:
                        p.normal_(0.0, 0.02, generator=g)
        self._dropout_gen = torch.Generator().manual_seed(seed + 3)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def extract_all(self, exams: list[BreastExam]) -> torch.Tensor:
        """Batched feature extraction: (B, 4, D) with zeros in absent slots."""
        B = len(exams)
        feats = torch.zeros(B, 4, self.backbone_cfg.feature_dim, dtype=self.dtype)
        for scale, backbone, base in (
            (Scale.MASKED, self.seg_backbone, 0),
            (Scale.CROPPED, self.crop_backbone, 2),
        ):
            index, tensors = [], []
            for i, exam in enumerate(exams):
                for view, (masked, cropped) in exam.planes().items():
                    plane = masked if scale == Scale.MASKED else cropped
                    index.append((i, base + (0 if view == View.CC else 1)))
                    tensors.append(plane_tensor(plane, self.dtype))
            if tensors:
                out = backbone(torch.stack(tensors))
                for (i, slot), vec in zip(index, out):
                    feats[i, slot] = vec
        return feats

    def fuse(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, 4, D) -> fused (B, D) or (B, conv_flatten_dim)."""
        if self.fusion_cfg.strategy == FusionStrategy.MAXPOOL:
            return feats.amax(dim=1)
        return self.conv_fusion(feats)

    def forward_exams(
        self,
        exams: list[BreastExam],
        training: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Whole-pipeline forward for a batch of preprocessed exams -> (B,) logits."""
        self.train(training)
        feats = self.extract_all(exams)
        fused = self.fuse(feats)
        return self.head(fused, training=training, generator=generator or self._dropout_gen)

    def forward_exam(self, exam: BreastExam, training: bool = False) -> torch.Tensor:
        """Single-exam forward -> scalar logit tensor."""
        return self.forward_exams([exam], training=training)[0]

    def bundle_for(self, exam: BreastExam) -> FeatureBundle:
        return build_bundle(exam.planes(), self.seg_backbone, self.crop_backbone)

    def trainable_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}


def forward(exam: BreastExam, model: MsmvModel, training: bool = False) -> torch.Tensor:
    """Module-level alias for the per-exam pipeline forward."""
    return model.forward_exam(exam, training=training)
