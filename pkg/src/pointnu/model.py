"""Network: high-resolution backbone, pyramid fusion necks and the three heads.

All tensors are NCHW. The heatmap / kernel grids live at stride ``R`` and the
feature map at stride 1.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "pointnu-checkpoint"
CHECKPOINT_VERSION = 1

NECKS = ("jpfm-unshared", "jpfm-shared", "fpn", "aspp")
SEGMENTORS = ("dynamic", "standard")
BACKBONES = {
    # name: (base width c, basic blocks per branch)
    "hr-small": (16, 1),
    "hr-large": (64, 4),
}


@dataclass
class ModelConfig:
    num_classes: int = 5
    kernel_dim: int = 64
    stride: int = 4
    backbone: str = "hr-small"
    neck: str = "jpfm-unshared"
    jpfm_dilations: tuple[int, ...] = (1, 2, 4, 8)
    jpfm_branch_channels: int = 128
    jpfm_out_channels: int = 256
    head_channels: int = 256
    head_depth: int = 7
    feature_channels: int = 256
    segmentor: str = "dynamic"
    gn_groups: int = 32
    prior_prob: float = 0.1

    def __post_init__(self):
        self.jpfm_dilations = tuple(int(d) for d in self.jpfm_dilations)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {sorted(BACKBONES)}")
        if self.neck not in NECKS:
            raise ValueError(f"unknown neck {self.neck!r}, expected one of {NECKS}")
        if self.segmentor not in SEGMENTORS:
            raise ValueError(f"unknown segmentor {self.segmentor!r}, expected one of {SEGMENTORS}")
        if self.stride not in (2, 4, 8, 16, 32):
            raise ValueError(f"stride must be a power of two in [2, 32], got {self.stride}")
        d = self.jpfm_dilations
        if not d or any(b <= a for a, b in zip(d, d[1:])) or d[0] < 1:
            raise ValueError(f"dilations must be strictly increasing positive ints, got {d}")
        for name in ("kernel_dim", "jpfm_branch_channels", "jpfm_out_channels",
                     "head_channels", "feature_channels", "head_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def base_width(self) -> int:
        return BACKBONES[self.backbone][0]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["jpfm_dilations"] = list(self.jpfm_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class NetworkOutput(NamedTuple):
    heatmap: torch.Tensor  # (B, C, H/R, W/R), sigmoid probabilities
    kernels: torch.Tensor | None  # (B, E, H/R, W/R)
    features: torch.Tensor  # (B, E, H, W); zero channels with the standard segmentor
    heatmap_logits: torch.Tensor
    mask_stack: torch.Tensor | None = None  # standard segmentor: (B, H/R*W/R, H/2, W/2) logits


def _gn(channels: int, groups: int) -> nn.GroupNorm:
    g = math.gcd(channels, groups)
    return nn.GroupNorm(g, channels)


class ConvBlock(nn.Sequential):
    """3x3 conv + group norm + ReLU."""

    def __init__(self, cin, cout, groups=32, dilation=1, stride=1, kernel_size=3):
        pad = dilation * (kernel_size // 2)
        super().__init__(
            nn.Conv2d(cin, cout, kernel_size, stride=stride, padding=pad, dilation=dilation, bias=False),
            _gn(cout, groups),
            nn.ReLU(inplace=True),
        )


class BasicBlock(nn.Module):
    def __init__(self, channels, groups):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.n1 = _gn(channels, groups)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.n2 = _gn(channels, groups)

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + x)


class _Fuse(nn.Module):
    """Cross-resolution exchange: every output branch sums all inputs resampled to it."""

    def __init__(self, widths, groups):
        super().__init__()
        self.widths = list(widths)
        n = len(widths)
        self.paths = nn.ModuleList()
        for i in range(n):
            row = nn.ModuleList()
            for j in range(n):
                if i == j:
                    row.append(nn.Identity())
                elif j > i:
                    # coarser -> finer: 1x1 projection, then bilinear upsample in forward
                    row.append(nn.Sequential(nn.Conv2d(widths[j], widths[i], 1, bias=False), _gn(widths[i], groups)))
                else:
                    steps = []
                    cin = widths[j]
                    for s in range(i - j):
                        last = s == i - j - 1
                        cout = widths[i] if last else cin
                        steps += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False), _gn(cout, groups)]
                        if not last:
                            steps.append(nn.ReLU(inplace=True))
                    row.append(nn.Sequential(*steps))
            self.paths.append(row)

    def forward(self, xs):
        outs = []
        for i, row in enumerate(self.paths):
            size = xs[i].shape[-2:]
            acc = xs[i]
            for j, path in enumerate(row):
                if i == j:
                    continue
                y = path(xs[j])
                if j > i:
                    y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
                acc = acc + y
            outs.append(F.relu(acc))
        return outs


class _HRStage(nn.Module):
    def __init__(self, widths, blocks, groups):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(*[BasicBlock(w, groups) for _ in range(blocks)]) for w in widths
        )
        self.fuse = _Fuse(widths, groups)

    def forward(self, xs):
        return self.fuse([b(x) for b, x in zip(self.branches, xs)])


class HRBackbone(nn.Module):
    """Parallel multi-resolution backbone emitting strides 4, 8, 16, 32 with widths c, 2c, 4c, 8c."""

    def __init__(self, width: int = 16, blocks: int = 1, groups: int = 32):
        super().__init__()
        c = width
        self.widths = (c, 2 * c, 4 * c, 8 * c)
        self.stem = nn.Sequential(
            ConvBlock(3, c, groups, stride=2),
            ConvBlock(c, c, groups, stride=2),
            BasicBlock(c, groups),
        )
        self.to_s8 = ConvBlock(c, 2 * c, groups, stride=2)
        self.stage2 = _HRStage(self.widths[:2], blocks, groups)
        self.to_s16 = ConvBlock(2 * c, 4 * c, groups, stride=2)
        self.to_s32 = ConvBlock(4 * c, 8 * c, groups, stride=2)
        self.stage3 = _HRStage(self.widths, blocks, groups)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} is not divisible by 32; pad the image first")
        s4 = self.stem(x)
        s4, s8 = self.stage2([s4, self.to_s8(s4)])
        s16 = self.to_s16(s8)
        s32 = self.to_s32(s16)
        return self.stage3([s4, s8, s16, s32])


def fuse_multiscale(features) -> torch.Tensor:
    """Bilinearly upsample strides 8/16/32 to the stride-4 grid and concatenate channels."""
    base = features[0]
    size = base.shape[-2:]
    ups = [base] + [F.interpolate(f, size=size, mode="bilinear", align_corners=False) for f in features[1:]]
    return torch.cat(ups, dim=1)


class JPFM(nn.Module):
    """Parallel dilated 3x3 convolutions, concatenated and mixed by a 1x1 conv."""

    def __init__(self, cin, branch_channels=128, out_channels=256, dilations=(1, 2, 4, 8), groups=32):
        super().__init__()
        self.dilations = tuple(dilations)
        self.paths = nn.ModuleList(ConvBlock(cin, branch_channels, groups, dilation=d) for d in self.dilations)
        self.mix = nn.Sequential(
            nn.Conv2d(branch_channels * len(self.dilations), out_channels, 1, bias=False),
            _gn(out_channels, groups),
            nn.ReLU(inplace=True),
        )
        self.out_channels = out_channels

    def forward(self, x):
        return self.mix(torch.cat([p(x) for p in self.paths], dim=1))


def receptive_field(dilation: int, kernel_size: int = 3) -> int:
    """Extent in grid cells covered by one dilated convolution."""
    return dilation * (kernel_size - 1) + 1


class FPNNeck(nn.Module):
    """Top-down feature pyramid; returns the finest (stride-4) level."""

    def __init__(self, widths, out_channels, groups):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(w, out_channels, 1) for w in widths)
        self.smooth = ConvBlock(out_channels, out_channels, groups)
        self.out_channels = out_channels

    def forward(self, feats):
        top = self.lateral[-1](feats[-1])
        for lat, f in zip(reversed(self.lateral[:-1]), reversed(feats[:-1])):
            top = lat(f) + F.interpolate(top, size=f.shape[-2:], mode="bilinear", align_corners=False)
        return self.smooth(top)


def coord_channels(n: int, h: int, w: int, device=None, dtype=None) -> torch.Tensor:
    """Two channels holding each cell's x and y mapped linearly to [-1, 1]."""
    xs = torch.linspace(-1.0, 1.0, w, device=device, dtype=dtype)
    ys = torch.linspace(-1.0, 1.0, h, device=device, dtype=dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy]).unsqueeze(0).expand(n, 2, h, w)


def _tower(cin, width, depth, groups):
    layers = [ConvBlock(cin, width, groups)]
    layers += [ConvBlock(width, width, groups) for _ in range(depth - 1)]
    return nn.Sequential(*layers)


class UpsampleBlock(nn.Module):
    def __init__(self, cin, cout, groups):
        super().__init__()
        self.conv = ConvBlock(cin, cout, groups)

    def forward(self, x):
        return F.interpolate(self.conv(x), scale_factor=2, mode="bilinear", align_corners=False)


class PointNuNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.gn_groups
        width, blocks = BACKBONES[cfg.backbone]
        self.backbone = HRBackbone(width, blocks, g)
        fused_ch = sum(self.backbone.widths)

        def make_jpfm(dilations=cfg.jpfm_dilations):
            return JPFM(fused_ch, cfg.jpfm_branch_channels, cfg.jpfm_out_channels, dilations, g)

        if cfg.neck == "jpfm-unshared":
            branches = ("heatmap", "kernel", "feature") if cfg.segmentor == "dynamic" else ("heatmap", "feature")
            self.necks = nn.ModuleDict({k: make_jpfm() for k in branches})
        elif cfg.neck == "jpfm-shared":
            self.necks = nn.ModuleDict({"shared": make_jpfm()})
        elif cfg.neck == "aspp":
            self.necks = nn.ModuleDict({"shared": make_jpfm((1, 6, 12, 18))})
        else:
            self.necks = nn.ModuleDict({"shared": FPNNeck(self.backbone.widths, cfg.jpfm_out_channels, g)})
        nc = cfg.jpfm_out_channels

        self.heatmap_tower = _tower(nc, cfg.head_channels, cfg.head_depth, g)
        self.heatmap_out = nn.Conv2d(cfg.head_channels, cfg.num_classes, 1)
        nn.init.constant_(self.heatmap_out.bias, -math.log((1 - cfg.prior_prob) / cfg.prior_prob))

        if cfg.segmentor == "dynamic":
            self.kernel_tower = _tower(nc + 2, cfg.head_channels, cfg.head_depth, g)
            self.kernel_out = nn.Conv2d(cfg.head_channels, cfg.kernel_dim, 1)
            nn.init.normal_(self.kernel_out.weight, std=0.01)
            nn.init.zeros_(self.kernel_out.bias)
        # the standard segmentor reads its mask stack off the stride-2 map and needs no F
        ups = [UpsampleBlock(nc, cfg.feature_channels, g)]
        if cfg.segmentor == "dynamic":
            ups.append(UpsampleBlock(cfg.feature_channels, cfg.feature_channels, g))
            self.feature_out = nn.Conv2d(cfg.feature_channels, cfg.kernel_dim, 1)
        self.feature_up = nn.ModuleList(ups)
        self._standard_cells: int | None = None
        self.standard_out: nn.Module | None = None

    def neck_output(self, branch: str, fused, feats):
        key = branch if branch in self.necks else "shared"
        neck = self.necks[key]
        return neck(feats) if isinstance(neck, FPNNeck) else neck(fused)

    def _to_head_grid(self, x, h, w):
        if x.shape[-2:] == (h, w):
            return x
        return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)

    def _standard_head(self, cells: int) -> nn.Module:
        # One output channel per heatmap cell; built lazily because it depends on input size.
        if self.standard_out is None:
            self.standard_out = nn.Conv2d(self.cfg.feature_channels, cells, 1)
            self._standard_cells = cells
            ref = self.feature_up[0].conv[0].weight
            self.standard_out.to(ref.device, ref.dtype)
        elif self._standard_cells != cells:
            raise ValueError(
                f"standard segmentor was built for {self._standard_cells} cells, got {cells}; "
                "use a fixed input size with this segmentor")
        return self.standard_out

    def forward(self, x: torch.Tensor) -> NetworkOutput:
        n, _, H, W = x.shape
        R = self.cfg.stride
        h, w = H // R, W // R
        feats = self.backbone(x)
        fused = fuse_multiscale(feats)
        shared = None
        if "shared" in self.necks:
            shared = self.neck_output("shared", fused, feats)

        hm_in = shared if shared is not None else self.neck_output("heatmap", fused, feats)
        logits = self.heatmap_out(self.heatmap_tower(self._to_head_grid(hm_in, h, w)))

        kernels = None
        if self.cfg.segmentor == "dynamic":
            k_in = shared if shared is not None else self.neck_output("kernel", fused, feats)
            k_in = self._to_head_grid(k_in, h, w)
            k_in = torch.cat([k_in, coord_channels(n, h, w, k_in.device, k_in.dtype)], dim=1)
            kernels = self.kernel_out(self.kernel_tower(k_in))

        f = shared if shared is not None else self.neck_output("feature", fused, feats)
        half = self.feature_up[0](f)
        stack = None
        if self.cfg.segmentor == "dynamic":
            features = self.feature_out(self.feature_up[1](half))
        else:
            stack = self._standard_head(h * w)(half)
            features = half.new_zeros((n, 0, H, W))  # carries the output size only
        return NetworkOutput(torch.sigmoid(logits), kernels, features, logits, stack)


def build_model(cfg: ModelConfig, seed: int | None = None) -> PointNuNet:
    if seed is not None:
        torch.manual_seed(seed)
    return PointNuNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: PointNuNet, extra: dict | None = None) -> Path:
    """Write an atomic, self-describing checkpoint (config echo + named parameters)."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
    }
    if model.standard_out is not None:
        payload["standard_cells"] = model._standard_cells
    payload.update(extra or {})
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if "version" not in payload:
        raise ValueError(f"{path} has no version field")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path} has version {payload['version']}, this build reads <= {CHECKPOINT_VERSION}")
    return payload


def load_checkpoint(path) -> tuple[PointNuNet, dict]:
    payload = read_checkpoint(path)
    model = PointNuNet(ModelConfig.from_dict(payload["model_config"]))
    if "standard_cells" in payload:
        model._standard_head(payload["standard_cells"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
