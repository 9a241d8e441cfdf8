"""Plan-driven generator and PatchGAN discriminator.

The generator is described by an explicit layer plan whose ops map 1:1 onto
the portable weight-archive kinds (conv, leaky_relu, relu, nn_resize,
concat_skip, norm_affine, clamp_nonneg) plus a training-only dropout op.
Executing the plan in forward() guarantees the exported archive computes
exactly what the torch model computes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    pad_mode: str = "zeros"
    kind: str = "conv"


@dataclass(frozen=True)
class LeakyRelu:
    slope: float = 0.2
    kind: str = "leaky_relu"


@dataclass(frozen=True)
class Relu:
    kind: str = "relu"


@dataclass(frozen=True)
class NnResize:
    factor: int = 2
    kind: str = "nn_resize"


@dataclass(frozen=True)
class ConcatSkip:
    source: int
    kind: str = "concat_skip"


@dataclass(frozen=True)
class NormAffine:
    channels: int
    kind: str = "norm_affine"


@dataclass(frozen=True)
class ClampNonneg:
    kind: str = "clamp_nonneg"


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5
    kind: str = "dropout"


PlanOp = Union[Conv, LeakyRelu, Relu, NnResize, ConcatSkip, NormAffine, ClampNonneg, Dropout]


class PlanNet(nn.Module):
    """Executes a layer plan; records every op output for skip connections."""

    def __init__(self, plan: List[PlanOp]):
        super().__init__()
        self.plan = list(plan)
        modules = []
        for op in self.plan:
            if isinstance(op, Conv):
                modules.append(
                    nn.Conv2d(
                        op.in_channels,
                        op.out_channels,
                        op.kernel,
                        stride=op.stride,
                        padding=op.padding,
                        padding_mode="replicate" if op.pad_mode == "replicate" else "zeros",
                    )
                )
            elif isinstance(op, NormAffine):
                modules.append(nn.BatchNorm2d(op.channels))
            else:
                modules.append(nn.Identity())
        self.ops = nn.ModuleList(modules)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outputs: List[torch.Tensor] = []
        act = x
        for op, module in zip(self.plan, self.ops):
            if isinstance(op, (Conv, NormAffine)):
                act = module(act)
            elif isinstance(op, LeakyRelu):
                act = F.leaky_relu(act, op.slope)
            elif isinstance(op, Relu):
                act = F.relu(act)
            elif isinstance(op, NnResize):
                act = F.interpolate(act, scale_factor=op.factor, mode="nearest")
            elif isinstance(op, ConcatSkip):
                act = torch.cat([act, outputs[op.source]], dim=1)
            elif isinstance(op, ClampNonneg):
                act = act.clamp(min=0.0)
            elif isinstance(op, Dropout):
                act = F.dropout(act, op.p, training=self.training)
            outputs.append(act)
        return act


def build_generator_plan(
    depth: int = 5,
    first_filters: int = 32,
    max_filters: int = 512,
    in_channels: int = 1,
    dropout_layers: int = 0,
) -> List[PlanOp]:
    """U-shaped plan: stride-2 4x4 encoder, resize + 3x3 decoder with skips.

    The default is the reference topology (5 encoder levels, 32 first-layer
    filters doubling to a 512 cap, mirrored decoder); the archive owns the
    architecture, so any depth/width can be exported. Decoder convolutions
    pad by replication so a constant activation stays constant through the
    resize-convolution stage (no checkerboard parity).
    """
    plan: List[PlanOp] = []
    skips: List[Tuple[int, int]] = []  # (plan index of activation, channels)
    channels = in_channels
    filters = [min(first_filters * (2**i), max_filters) for i in range(depth)]

    for i, out_ch in enumerate(filters):
        plan.append(Conv(channels, out_ch, 4, 2, 1, "zeros"))
        if i > 0:
            plan.append(NormAffine(out_ch))
        plan.append(LeakyRelu(0.2))
        channels = out_ch
        if i < depth - 1:
            skips.append((len(plan) - 1, out_ch))

    for i in range(depth - 1, -1, -1):
        out_ch = filters[i - 1] if i > 0 else first_filters
        plan.append(NnResize(2))
        plan.append(Conv(channels, out_ch, 3, 1, 1, "replicate"))
        plan.append(NormAffine(out_ch))
        plan.append(Relu())
        if dropout_layers and (depth - 1 - i) < dropout_layers:
            plan.append(Dropout(0.5))
        channels = out_ch
        if i > 0:
            src, skip_ch = skips[i - 1]
            plan.append(ConcatSkip(src))
            channels += skip_ch

    plan.append(Conv(channels, 1, 3, 1, 1, "replicate"))
    plan.append(ClampNonneg())
    return plan


def build_generator(
    depth: int = 5,
    first_filters: int = 32,
    max_filters: int = 512,
    in_channels: int = 1,
    dropout_layers: int = 0,
) -> PlanNet:
    return PlanNet(
        build_generator_plan(depth, first_filters, max_filters, in_channels, dropout_layers)
    )


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN: scores (x, y) patch pairs with a logit map."""

    def __init__(self, in_channels: int = 2, first_filters: int = 32):
        super().__init__()
        f = first_filters
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, f, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(f, 2 * f, 4, stride=2, padding=1),
            nn.BatchNorm2d(2 * f),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * f, 4 * f, 4, stride=1, padding=1),
            nn.BatchNorm2d(4 * f),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * f, 1, 4, stride=1, padding=1),
        )

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([x, y], dim=1))
