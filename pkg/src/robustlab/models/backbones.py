"""Parametric residual network spanning ResNet-50 to the ConvNeXt block form.

Widths follow the classic doubling schedule from a base width (embed_dim),
scaled by width_multiplier when depthwise convolutions are on; the standard
bottleneck keeps a 4x wider residual stream, the inverted form carries the
block width on the stream and expands 4x inside. Kernel size is bundled with
the block form: 3x3 in the bottleneck, 7x7 depthwise in the inverted block.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class LayerNorm2d(nn.Module):
    """Channel LayerNorm on (N,C,H,W) tensors."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


def norm2d(kind, channels):
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return LayerNorm2d(channels)


def norm1d(kind, channels):
    if kind == "batch":
        return nn.BatchNorm1d(channels)
    return nn.LayerNorm(channels)


def activation(name):
    return nn.ReLU() if name == "relu" else nn.GELU()


class Bottleneck(nn.Module):
    """Classic 1x1 -> 3x3 -> 1x1 bottleneck with a 4x wide stream.

    The 3x3 turns depthwise when the config asks for it; the final activation
    sits after the residual add, as in the original design.
    """

    def __init__(self, c_in, width, c_out, stride, cfg):
        super().__init__()
        groups = width if cfg.depthwise_conv else 1
        self.conv1 = nn.Conv2d(c_in, width, 1, bias=False)
        self.norm1 = norm2d(cfg.norm_kind, width)
        self.conv2 = nn.Conv2d(
            width, width, 3, stride=stride, padding=1, groups=groups, bias=False
        )
        self.norm2 = norm2d(cfg.norm_kind, width)
        self.conv3 = nn.Conv2d(width, c_out, 1, bias=False)
        self.norm3 = norm2d(cfg.norm_kind, c_out)
        self.act = activation(cfg.activation)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                norm2d(cfg.norm_kind, c_out),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.act(self.norm2(self.conv2(out)))
        out = self.norm3(self.conv3(out))
        return self.act(out + self.shortcut(x))


class InvertedBlock(nn.Module):
    """Depthwise 7x7 -> norm -> pointwise expand -> act -> pointwise contract.

    With reduced_norm_act this is the full modern form: a single norm, a
    single activation, optional per-channel scale, no activation after the
    residual add. Without it, the extra norms/activations of the classic
    design are kept in place.
    """

    def __init__(self, c_in, width, stride, cfg):
        super().__init__()
        self.reduced = cfg.reduced_norm_act
        # depthwise when c_in == width; at in-block stage transitions the
        # group count falls back to the gcd so channels can change
        self.dwconv = nn.Conv2d(
            c_in, width, 7, stride=stride, padding=3,
            groups=math.gcd(c_in, width), bias=False,
        )
        self.norm1 = norm2d(cfg.norm_kind, width)
        self.pw1 = nn.Conv2d(width, 4 * width, 1)
        self.pw2 = nn.Conv2d(4 * width, width, 1)
        self.act = activation(cfg.activation)
        if not self.reduced:
            self.norm2 = norm2d(cfg.norm_kind, 4 * width)
            self.norm3 = norm2d(cfg.norm_kind, width)
        if cfg.layer_scale is not None:
            self.gamma = nn.Parameter(cfg.layer_scale * torch.ones(width))
        else:
            self.gamma = None
        if stride != 1 or c_in != width:
            self.shortcut = nn.Conv2d(c_in, width, 1, stride=stride, bias=False)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.norm1(self.dwconv(x))
        if self.reduced:
            out = self.pw2(self.act(self.pw1(out)))
        else:
            out = self.act(out)
            out = self.act(self.norm2(self.pw1(out)))
            out = self.norm3(self.pw2(out))
        if self.gamma is not None:
            out = out * self.gamma.view(1, -1, 1, 1)
        out = out + self.shortcut(x)
        return out if self.reduced else self.act(out)


class LadderNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        mult = cfg.width_multiplier if cfg.depthwise_conv else 1.0
        inner = [round(cfg.embed_dim * mult) * (2 ** s) for s in range(4)]
        stream = inner if cfg.inverted_bottleneck else [4 * w for w in inner]

        if cfg.patchify_stem:
            self.stem = nn.Sequential(
                nn.Conv2d(cfg.input_size[0], inner[0], 4, stride=4),
                norm2d(cfg.norm_kind, inner[0]),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(cfg.input_size[0], inner[0], 7, stride=2, padding=3,
                          bias=False),
                norm2d(cfg.norm_kind, inner[0]),
                activation(cfg.activation),
                nn.MaxPool2d(3, stride=2, padding=1),
            )

        stages = []
        c_in = inner[0]
        for s in range(4):
            layers = []
            if cfg.separate_downsample and s > 0:
                layers.append(
                    nn.Sequential(
                        norm2d(cfg.norm_kind, c_in),
                        nn.Conv2d(c_in, stream[s], 2, stride=2),
                    )
                )
                c_in = stream[s]
            for b in range(cfg.stage_blocks[s]):
                stride = 2 if (b == 0 and s > 0 and not cfg.separate_downsample) else 1
                if cfg.inverted_bottleneck:
                    layers.append(InvertedBlock(c_in, stream[s], stride, cfg))
                else:
                    layers.append(Bottleneck(c_in, inner[s], stream[s], stride, cfg))
                c_in = stream[s]
            stages.append(nn.Sequential(*layers))
        self.stages = nn.Sequential(*stages)
        # the modern block form norms the pooled features before the head
        self.head_norm = (
            norm1d(cfg.norm_kind, c_in) if cfg.reduced_norm_act else nn.Identity()
        )
        self.head = nn.Linear(c_in, cfg.num_classes)

    def forward(self, x):
        x = self.stages(self.stem(x))
        x = x.mean(dim=(2, 3))
        return self.head(self.head_norm(x))
