"""Three-stream boundary-aware segmentation network.

A shallow spatial stream keeps stride-8 detail, a pre-activation residual
backbone plus two context-aware attention blocks captures global context,
and a boundary stream driven by a global-gated convolution predicts class
boundaries. The three feature sets are fused with channel reweighting into
the per-pixel class distribution.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ShapeError, TrainConfig

SPATIAL_WIDTHS = (64, 128, 256)
BACKBONE_INNER = (64, 128, 256, 512)
GATE_WIDTH = 512
FUSION_DEPTH = 512
BOUNDARY_FUSE_DEPTH = 64
SE_REDUCTION = 16
CAA_REDUCTION = 8


def _scaled(width: int, divisor: int) -> int:
    return max(1, width // divisor)


def _upsample(x: torch.Tensor, size) -> torch.Tensor:
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class ConvBNReLU(nn.Module):
    def __init__(self, in_depth, out_depth, kernel=3, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_depth, out_depth, kernel, stride, kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(out_depth)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class SpatialStream(nn.Module):
    """Three stride-2 conv blocks; output stride 8 with rich spatial detail."""

    def __init__(self, divisor=1, in_depth=1):
        super().__init__()
        w1, w2, w3 = (_scaled(w, divisor) for w in SPATIAL_WIDTHS)
        self.block1 = ConvBNReLU(in_depth, w1, stride=2)
        self.block2 = ConvBNReLU(w1, w2, stride=2)
        self.block3 = ConvBNReLU(w2, w3, stride=2)
        self.out_depth = w3

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"spatial stream needs H, W divisible by 8, got {h}x{w}")
        return self.block3(self.block2(self.block1(x)))


class PreActBottleneck(nn.Module):
    """Pre-activation bottleneck unit: BN-ReLU precedes each convolution."""

    def __init__(self, in_depth, inner, out_depth, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_depth)
        self.conv1 = nn.Conv2d(in_depth, inner, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(inner)
        self.conv2 = nn.Conv2d(inner, inner, 3, stride, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(inner)
        self.conv3 = nn.Conv2d(inner, out_depth, 1, bias=False)
        if stride != 1 or in_depth != out_depth:
            self.shortcut = nn.Conv2d(in_depth, out_depth, 1, stride, bias=False)
        else:
            self.shortcut = None

    def forward(self, x):
        pre = F.relu(self.bn1(x))
        skip = self.shortcut(pre) if self.shortcut is not None else x
        y = self.conv1(pre)
        y = self.conv2(F.relu(self.bn2(y)))
        y = self.conv3(F.relu(self.bn3(y)))
        return y + skip


class PreActResNet(nn.Module):
    """Pre-activation residual backbone exposing stride-8 and stride-32 maps.

    Stage outputs are raw (pre-activation), so consumers must normalize and
    activate before use. Block counts and widths are configurable for
    desk-scale runs; (3, 4, 23, 3) at divisor 1 is the full 101-layer layout.
    """

    def __init__(self, blocks=(3, 4, 23, 3), divisor=1, in_depth=1):
        super().__init__()
        stem_depth = _scaled(64, divisor)
        self.stem = nn.Conv2d(in_depth, stem_depth, 7, 2, 3, bias=False)
        self.pool = nn.MaxPool2d(3, 2, 1)
        inner = [_scaled(w, divisor) for w in BACKBONE_INNER]
        outer = [4 * w for w in inner]
        depth = stem_depth
        for idx, (n_units, width, out_depth) in enumerate(zip(blocks, inner, outer), start=1):
            stride = 1 if idx == 1 else 2
            units = OrderedDict()
            for u in range(n_units):
                units[f"unit{u + 1}"] = PreActBottleneck(
                    depth, width, out_depth, stride if u == 0 else 1
                )
                depth = out_depth
            setattr(self, f"stage{idx}", nn.Sequential(units))
        self.mid_depth = outer[1]
        self.high_depth = outer[3]

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"backbone needs H, W divisible by 32, got {h}x{w}")
        x = self.pool(self.stem(x))
        x = self.stage1(x)
        mid = self.stage2(x)  # stride 8
        high = self.stage4(self.stage3(mid))  # stride 32
        return mid, high


class FeatureProjection(nn.Module):
    """BN + ReLU on a raw pre-activation map, then a 1x1 channel projection."""

    def __init__(self, in_depth, out_depth):
        super().__init__()
        self.bn = nn.BatchNorm2d(in_depth)
        self.conv = nn.Conv2d(in_depth, out_depth, 1)

    def forward(self, x):
        return self.conv(F.relu(self.bn(x)))


class ContextAwareAttention(nn.Module):
    """Pixel-affinity self-attention mixed in residually with strength gamma.

    gamma starts at exactly 0 so the block is an identity at initialization
    and the network relies on local cues before weighting non-local evidence.
    """

    def __init__(self, depth, attention_cap=4096):
        super().__init__()
        reduced = max(1, depth // CAA_REDUCTION)
        self.query = nn.Conv2d(depth, reduced, 1)
        self.key = nn.Conv2d(depth, reduced, 1)
        self.value = nn.Conv2d(depth, depth, 1)
        self.gamma = nn.Parameter(torch.zeros(1))
        self.attention_cap = attention_cap

    def forward(self, x):
        b, d, h, w = x.shape
        positions = h * w
        if positions > self.attention_cap:
            raise ShapeError(
                f"attention size {positions}x{positions} exceeds cap "
                f"{self.attention_cap} (memory grows quadratically)"
            )
        q = self.query(x).flatten(2).transpose(1, 2)  # (B, L, D')
        k = self.key(x).flatten(2)  # (B, D', L)
        affinity = torch.sigmoid(torch.bmm(q, k))  # (B, L, L)
        v = self.value(x).flatten(2).transpose(1, 2)  # (B, L, D)
        mixed = torch.bmm(affinity, v).transpose(1, 2).reshape(b, d, h, w)
        return self.gamma * mixed + x


class ContextStream(nn.Module):
    """Backbone features projected to a common depth, optionally attended."""

    def __init__(self, cfg: TrainConfig, use_caa=True, in_depth=1):
        super().__init__()
        div = cfg.width_divisor
        self.backbone = PreActResNet(cfg.backbone_blocks, div, in_depth)
        depth = _scaled(cfg.projection_depth, div)
        self.project_mid = FeatureProjection(self.backbone.mid_depth, depth)
        self.project_high = FeatureProjection(self.backbone.high_depth, depth)
        if use_caa:
            self.attend_mid = ContextAwareAttention(depth, cfg.attention_cap)
            self.attend_high = ContextAwareAttention(depth, cfg.attention_cap)
        else:
            self.attend_mid = None
            self.attend_high = None
        self.out_depth = depth

    def forward(self, x):
        mid, high = self.backbone(x)
        mid = self.project_mid(mid)
        high = self.project_high(high)
        if self.attend_mid is not None:
            mid = self.attend_mid(mid)
            high = self.attend_high(high)
        return mid, high


class GlobalGatedConv(nn.Module):
    """Residual gate: f1 * sigmoid(gate(f1 || f2)) + f1.

    The gate path is BN -> 3x3 conv -> ReLU -> 3x3 conv -> BN -> 1x1
    projection to f1's depth -> sigmoid, so the output stays within
    [f1, 2*f1] elementwise for non-negative f1.
    """

    def __init__(self, depth1, depth2, divisor=1):
        super().__init__()
        gate_width = _scaled(GATE_WIDTH, divisor)
        self.bn_in = nn.BatchNorm2d(depth1 + depth2)
        self.conv1 = nn.Conv2d(depth1 + depth2, gate_width, 3, padding=1)
        self.conv2 = nn.Conv2d(gate_width, gate_width, 3, padding=1)
        self.bn_out = nn.BatchNorm2d(gate_width)
        self.project = nn.Conv2d(gate_width, depth1, 1)
        self.out_depth = depth1

    def forward(self, f1, f2):
        if f1.shape[-2:] != f2.shape[-2:]:
            raise ShapeError(
                f"gated conv inputs must share spatial dims, got "
                f"{tuple(f1.shape[-2:])} vs {tuple(f2.shape[-2:])}"
            )
        y = self.bn_in(torch.cat([f1, f2], dim=1))
        y = F.relu(self.conv1(y))
        y = self.bn_out(self.conv2(y))
        gate = torch.sigmoid(self.project(y))
        return f1 * gate + f1


class ResidualBlock(nn.Module):
    def __init__(self, depth):
        super().__init__()
        self.conv1 = nn.Conv2d(depth, depth, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(depth)
        self.conv2 = nn.Conv2d(depth, depth, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(depth)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(x + y)


class UpsampleBlock(nn.Module):
    """Stride-2 transposed convolution followed by BN + ReLU."""

    def __init__(self, in_depth, out_depth):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(in_depth, out_depth, 2, stride=2)
        self.bn = nn.BatchNorm2d(out_depth)

    def forward(self, x):
        return F.relu(self.bn(self.deconv(x)))


class BoundaryStream(nn.Module):
    """Predicts a boundary probability map from the two context features.

    The stride-32 feature is upsampled onto the stride-8 one, a residual
    block sharpens the latter, and the gated convolution emphasizes
    boundary-relevant activations. The gated feature doubles as the
    boundary contribution to fusion.
    """

    def __init__(self, depth, divisor=1):
        super().__init__()
        self.refine = ResidualBlock(depth)
        self.ggc = GlobalGatedConv(depth, depth, divisor)
        h1 = max(1, depth // 2)
        h2 = max(1, depth // 4)
        self.up1 = UpsampleBlock(depth, h1)
        self.up2 = UpsampleBlock(h1, h2)
        self.head = nn.Conv2d(h2, 1, 1)
        self.out_depth = depth

    def forward(self, ctx_mid, ctx_high, out_size):
        high = _upsample(ctx_high, ctx_mid.shape[-2:])
        feat = self.ggc(self.refine(ctx_mid), high)
        prob = torch.sigmoid(self.head(self.up2(self.up1(feat))))
        prob = _upsample(prob, out_size)
        return feat, prob.squeeze(1)


class FeatureFusion(nn.Module):
    """Concatenate the streams, reweight channels, and project to classes."""

    def __init__(self, spatial_depth, ctx_depth, boundary_depth, num_classes, divisor=1):
        super().__init__()
        fused = _scaled(FUSION_DEPTH, divisor)
        self.bn_in = nn.BatchNorm2d(spatial_depth + ctx_depth)
        self.conv = nn.Conv2d(spatial_depth + ctx_depth, fused, 3, padding=1)
        if boundary_depth:
            b_depth = _scaled(BOUNDARY_FUSE_DEPTH, divisor)
            self.boundary_proj = nn.Conv2d(boundary_depth, b_depth, 1)
            gate_depth = fused + b_depth
        else:
            self.boundary_proj = None
            gate_depth = fused
        hidden = max(1, gate_depth // SE_REDUCTION)
        self.gate_reduce = nn.Conv2d(gate_depth, hidden, 1)
        self.gate_expand = nn.Conv2d(hidden, gate_depth, 1)
        self.classifier = nn.Conv2d(gate_depth, num_classes, 1)

    def fuse_features(self, spatial_f, ctx_f, boundary_f=None):
        if spatial_f.shape[0] != ctx_f.shape[0]:
            raise ShapeError("spatial and context features come from different batches")
        ctx_f = _upsample(ctx_f, spatial_f.shape[-2:])
        x = self.conv(self.bn_in(torch.cat([spatial_f, ctx_f], dim=1)))
        if self.boundary_proj is not None:
            if boundary_f is None:
                raise ShapeError("fusion was built with a boundary input but none was given")
            boundary_f = _upsample(boundary_f, spatial_f.shape[-2:])
            x = torch.cat([x, self.boundary_proj(boundary_f)], dim=1)
        weight = torch.sigmoid(
            self.gate_expand(F.relu(self.gate_reduce(F.adaptive_avg_pool2d(x, 1))))
        )
        return x + x * weight

    def forward(self, spatial_f, ctx_f, boundary_f, out_size):
        fused = self.fuse_features(spatial_f, ctx_f, boundary_f)
        return _upsample(self.classifier(fused), out_size)


@dataclass
class NetworkOutput:
    """Per-pixel class scores at input resolution, plus the boundary map."""

    seg_logits: torch.Tensor  # (B, C, H, W)
    seg_probs: torch.Tensor  # (B, C, H, W), softmax over dim 1
    boundary_prob: torch.Tensor | None  # (B, H, W) in [0, 1], None when ablated


class TBNet(nn.Module):
    """The full three-stream network.

    ``use_caa=False`` drops the attention blocks from the context stream;
    ``use_boundary=False`` drops the boundary stream and its fusion input.
    """

    def __init__(self, cfg: TrainConfig, num_classes=9, use_caa=True, use_boundary=True):
        super().__init__()
        div = cfg.width_divisor
        self.boundary_fusion_source = cfg.boundary_fusion_source
        self.num_classes = num_classes
        self.spatial = SpatialStream(div)
        self.context = ContextStream(cfg, use_caa=use_caa)
        depth = self.context.out_depth
        if use_boundary:
            self.boundary = BoundaryStream(depth, div)
            boundary_depth = 1 if cfg.boundary_fusion_source == "map" else depth
        else:
            self.boundary = None
            boundary_depth = 0
        self.fusion = FeatureFusion(
            self.spatial.out_depth, depth, boundary_depth, num_classes, div
        )

    def forward(self, x) -> NetworkOutput:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, H, W) gray-scale input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} must be divisible by 32")
        spatial_f = self.spatial(x)
        ctx_mid, ctx_high = self.context(x)
        boundary_prob = None
        boundary_f = None
        if self.boundary is not None:
            boundary_feat, boundary_prob = self.boundary(ctx_mid, ctx_high, (h, w))
            if self.boundary_fusion_source == "map":
                boundary_f = boundary_prob.unsqueeze(1)
            else:
                boundary_f = boundary_feat
        logits = self.fusion(spatial_f, ctx_mid, boundary_f, (h, w))
        return NetworkOutput(
            seg_logits=logits,
            seg_probs=F.softmax(logits, dim=1),
            boundary_prob=boundary_prob,
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def load_backbone_weights(self, arrays) -> tuple[list[str], list[str]]:
        """Copy externally trained backbone tensors by name ('/' or '.')-separated.

        Returns (loaded, skipped) name lists; shapes must match exactly.
        """
        own = dict(self.context.backbone.state_dict())
        loaded, skipped = [], []
        for name, value in arrays.items():
            key = name.replace("/", ".")
            tensor = torch.as_tensor(np.asarray(value))
            if key in own and own[key].shape == tensor.shape:
                own[key].copy_(tensor.to(own[key].dtype))
                loaded.append(key)
            else:
                skipped.append(key)
        return loaded, skipped


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic init: fan-in scaled normals for convs, unit batch norms.

    Attention mixing strengths stay at their mandated zero initialization.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                k = module.kernel_size[0] * module.kernel_size[1]
                fan_in = module.in_channels * k
                if isinstance(module, nn.ConvTranspose2d):
                    fan_in = max(1, fan_in // (module.stride[0] * module.stride[1]))
                std = math.sqrt(2.0 / fan_in)
                module.weight.copy_(
                    torch.empty_like(module.weight).normal_(0.0, std, generator=gen)
                )
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.reset_running_stats()
