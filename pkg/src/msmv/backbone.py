"""Hierarchical windowed-attention feature extractor.

Maps a single-channel side x side plane to a D-dimensional feature vector:
patch embedding -> stages of transformer blocks alternating plain and
shifted window attention, with 2x2 patch merging between stages -> global
average pool -> linear projection to D. Two independent instances (one per
image scale) make up the dual-backbone front end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadShift, ConfigMismatch, IndivisibleShape, OddShape
from .prep import ImagePlane


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = 224
    patch_size: int = 4
    embed_dim: int = 24
    depths: tuple[int, ...] = (2, 2)
    num_heads: tuple[int, ...] = (3, 6)
    window_size: int = 7
    feature_dim: int = 1024
    mlp_ratio: float = 4.0
    unfrozen_top_stages: int = 1
    in_channels: int = 1  # 3 only for loading externally pretrained weights

    def __post_init__(self) -> None:
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "num_heads", tuple(self.num_heads))
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have equal length")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        tokens = self.input_side // self.patch_size
        need = self.window_size * 2 ** (len(self.depths) - 1)
        if self.input_side % self.patch_size or tokens % need:
            raise ValueError(
                f"input_side/patch_size ({self.input_side}/{self.patch_size}) must be "
                f"divisible by window_size * 2^(stages-1) = {need}"
            )
        for h in self.num_heads:
            if self.embed_dim % h:
                raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {h}")
        if not 0 <= self.unfrozen_top_stages <= len(self.depths):
            raise ValueError("unfrozen_top_stages out of range")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2**i

    def stage_resolution(self, i: int) -> int:
        return self.input_side // self.patch_size // 2**i


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """Split an (H, W, C) or (B, H, W, C) map into non-overlapping windows.

    Returns (num_windows*B, window, window, C) in row-major window order.
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    B, H, W, C = x.shape
    if H % window or W % window:
        raise IndivisibleShape(f"{H}x{W} map not divisible by window {window}")
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).contiguous().view(-1, window, window, C)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    """Inverse of window_partition; returns (B, H, W, C) or (H, W, C) for B=1 input."""
    if H % window or W % window:
        raise IndivisibleShape(f"{H}x{W} map not divisible by window {window}")
    n = (H // window) * (W // window)
    B = windows.shape[0] // n
    x = windows.view(B, H // window, W // window, window, window, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).contiguous().view(B, H, W, -1)
    return x


def build_attention_mask(
    H: int, W: int, window: int, shift: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Additive (0 / -inf-like) mask blocking cross-region attention after a cyclic shift.

    Returns (num_windows, window*window, window*window).
    """
    img_mask = torch.zeros((H, W, 1), dtype=dtype)
    slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    cnt = 0
    for h in slices:
        for w in slices:
            img_mask[h, w, :] = cnt
            cnt += 1
    mask_windows = window_partition(img_mask, window).view(-1, window * window)
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return attn_mask.masked_fill(attn_mask != 0, -100.0).masked_fill(attn_mask == 0, 0.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention within windows, with relative position bias.

    Args:
        dim: number of input channels C.
        window: window side length.
        num_heads: attention heads; dim must be divisible by num_heads.
    """

    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        # bias table indexed by relative (dy, dx), each in [-(w-1), w-1]
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads)
        )
        coords = torch.stack(
            torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]  # (2, N, N)
        rel = rel.permute(1, 2, 0) + (window - 1)
        index = rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]
        self.register_buffer("relative_position_index", index)

        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor | None = None,
        need_weights: bool = False,
    ):
        """x: (num_windows*B, N, C); mask: (num_windows, N, N) additive or None."""
        B_, N, C = x.shape
        qkv = (
            self.qkv(x)
            .reshape(B_, N, 3, self.num_heads, C // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]  # each (B_, heads, N, head_dim)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[
            self.relative_position_index.view(-1)
        ].view(N, N, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(B_ // nW, nW, self.num_heads, N, N) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, N, N)
        attn = F.softmax(attn, dim=-1)

        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        out = self.proj(out)
        if need_weights:
            return out, attn
        return out


def shifted_window_attention(
    x: torch.Tensor,
    window: int,
    shift: int,
    attn: WindowAttention,
    need_weights: bool = False,
):
    """Window attention over a (H, W, C) or (B, H, W, C) map, optionally cyclically shifted.

    For shift = window // 2 the map is rolled by -shift, windows are
    attended with a mask that blocks pairs originating from different
    image regions, and the roll is undone on the output.
    """
    if shift not in (0, window // 2):
        raise BadShift(f"shift must be 0 or window//2 = {window // 2}, got {shift}")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    B, H, W, C = x.shape

    shifted = torch.roll(x, (-shift, -shift), dims=(1, 2)) if shift else x
    windows = window_partition(shifted, window).view(-1, window * window, C)
    mask = (
        build_attention_mask(H, W, window, shift, dtype=x.dtype).to(x.device)
        if shift
        else None
    )
    result = attn(windows, mask=mask, need_weights=need_weights)
    out_windows, weights = result if need_weights else (result, None)
    out = window_reverse(out_windows.view(-1, window, window, C), window, H, W)
    if shift:
        out = torch.roll(out, (shift, shift), dims=(1, 2))
    if squeeze:
        out = out.squeeze(0)
    return (out, weights) if need_weights else out


class PatchMerging(nn.Module):
    """2x2 neighborhood concatenation (4C) -> LayerNorm -> linear reduction to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, H, W, C) -> (B, H/2, W/2, 2C)."""
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise OddShape(f"patch merging needs even dims, got {H}x{W}")
        x0 = x[:, 0::2, 0::2, :]
        x1 = x[:, 1::2, 0::2, :]
        x2 = x[:, 0::2, 1::2, :]
        x3 = x[:, 1::2, 1::2, :]
        x = torch.cat([x0, x1, x2, x3], dim=-1)  # (B, H/2, W/2, 4C)
        return self.reduction(self.norm(x))


def patch_merge(x: torch.Tensor, merging: PatchMerging) -> torch.Tensor:
    """Apply patch merging to an (H, W, C) or (B, H, W, C) map."""
    squeeze = x.dim() == 3
    out = merging(x.unsqueeze(0) if squeeze else x)
    return out.squeeze(0) if squeeze else out


class SwinBlock(nn.Module):
    """Pre-norm transformer block: (shifted) window attention + MLP, both residual."""

    def __init__(self, dim: int, resolution: int, num_heads: int, window: int, shift: int, mlp_ratio: float):
        super().__init__()
        self.resolution = resolution
        self.window = window
        # a single window already sees the whole map; shifting adds nothing
        self.shift = 0 if resolution == window else shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, H, W, C), H = W = resolution."""
        shortcut = x
        x = self.norm1(x)
        x = shifted_window_attention(x, self.window, self.shift, self.attn)
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class Stage(nn.Module):
    """A run of blocks at one resolution, alternating shift 0 and window//2, then optional merge."""

    def __init__(self, cfg: BackboneConfig, index: int):
        super().__init__()
        dim = cfg.stage_dim(index)
        res = cfg.stage_resolution(index)
        self.blocks = nn.ModuleList(
            SwinBlock(
                dim,
                res,
                cfg.num_heads[index],
                cfg.window_size,
                0 if i % 2 == 0 else cfg.window_size // 2,
                cfg.mlp_ratio,
            )
            for i in range(cfg.depths[index])
        )
        self.downsample = PatchMerging(dim) if index < cfg.num_stages - 1 else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        if self.downsample is not None:
            x = self.downsample(x)
        return x


class Backbone(nn.Module):
    """One feature-extractor instance; see module docstring for the pipeline.

    Args:
        cfg: architecture hyperparameters.
        seed: deterministic parameter initialization seed.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Conv2d(
            cfg.in_channels, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.patch_norm = nn.LayerNorm(cfg.embed_dim)
        self.stages = nn.ModuleList(Stage(cfg, i) for i in range(cfg.num_stages))
        last_dim = cfg.stage_dim(cfg.num_stages - 1)
        self.norm = nn.LayerNorm(last_dim)
        self.proj = nn.Linear(last_dim, cfg.feature_dim)
        init_parameters(self, seed)
        set_freezing(self, cfg.unfrozen_top_stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 1, S, S) with S = cfg.input_side -> (B, D) features."""
        B, C, H, W = x.shape
        if H != self.cfg.input_side or W != self.cfg.input_side:
            raise ConfigMismatch(f"expected {self.cfg.input_side}px input, got {H}x{W}")
        if C == 1 and self.cfg.in_channels == 3:
            x = x.expand(-1, 3, -1, -1)  # grayscale replicated for pretrained weights
        x = self.patch_proj(x)  # (B, C, H/p, W/p)
        x = x.permute(0, 2, 3, 1)  # (B, H/p, W/p, C)
        x = self.patch_norm(x)
        for stage in self.stages:
            x = stage(x)
        x = self.norm(x)
        x = x.mean(dim=(1, 2))  # global average pool over tokens
        return self.proj(x)

    @property
    def frozen_set(self) -> set[str]:
        return {n for n, p in self.named_parameters() if not p.requires_grad}


def extract_features(backbone: Backbone, plane: ImagePlane) -> torch.Tensor:
    """Run one plane through a backbone in inference mode; returns a (D,) tensor."""
    if plane.side != backbone.cfg.input_side:
        raise ConfigMismatch(
            f"plane side {plane.side} != configured input {backbone.cfg.input_side}"
        )
    p = next(backbone.parameters())
    x = torch.from_numpy(plane.pixels).to(p.dtype).reshape(1, 1, plane.side, plane.side)
    training = backbone.training
    backbone.eval()
    with torch.no_grad():
        out = backbone(x)[0]
    backbone.train(training)
    return out


def set_freezing(backbone: Backbone, unfrozen_top_stages: int) -> set[str]:
    """Freeze all but the last `unfrozen_top_stages` stages and the output head.

    k = 0 leaves only the final projection trainable; 1 <= k < n_stages
    unfreezes the trailing k stages plus the final norm and projection;
    k = n_stages makes every parameter trainable. Returns the frozen names.
    """
    n = backbone.cfg.num_stages
    if not 0 <= unfrozen_top_stages <= n:
        raise ValueError(f"unfrozen_top_stages must be in [0, {n}]")
    for p in backbone.parameters():
        p.requires_grad_(False)
    for name, p in backbone.named_parameters():
        if name.startswith("proj."):
            p.requires_grad_(True)
        elif unfrozen_top_stages >= 1 and name.startswith("norm."):
            p.requires_grad_(True)
        elif unfrozen_top_stages == n and name.startswith(("patch_proj.", "patch_norm.")):
            p.requires_grad_(True)
        else:
            for i in range(n - unfrozen_top_stages, n):
                if name.startswith(f"stages.{i}."):
                    p.requires_grad_(True)
    return backbone.frozen_set


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic initialization: N(0, 0.02) weights, zero biases, unit norms.

    Relative-position bias tables start at zero.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "relative_position_bias_table" in name:
                p.zero_()
            elif "norm" in name:
                p.fill_(1.0) if name.endswith("weight") else p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, 0.02, generator=g)


def load_named_arrays(backbone: Backbone, archive_path: str) -> list[str]:
    """External-weights hook: copy arrays from an .npz archive into matching parameters.

    Arrays are matched by parameter name and must agree in shape; returns
    the names actually loaded. Entries in the archive without a matching
    parameter are ignored.
    """
    arrays = np.load(archive_path)
    params = dict(backbone.named_parameters())
    loaded = []
    with torch.no_grad():
        for name in arrays.files:
            p = params.get(name)
            if p is None:
                continue
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigMismatch(
                    f"array {name} has shape {arr.shape}, parameter expects {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
            loaded.append(name)
    return loaded
