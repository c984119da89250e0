"""Landmark regression network.

Five dense blocks, each mixing features from three dilation scales, feed ten
small head networks that each regress one (x, y) pixel coordinate. A head
learns to emit (0, 0) for landmark ids that are not present in the input
view, so presence and position come out of a single forward pass.

Block internals: three residual units with dilations 1, 2 and 4. Each unit's
output is concatenated onto the running feature volume, so the block output
mixes receptive fields of several sizes; a final stride-2 3x3 convolution
halves the spatial dimensions. After five blocks the input is reduced 32x.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .errors import ShapeError, SpecError

DILATIONS = (1, 2, 4)
N_LANDMARKS = 10
N_BLOCKS = 5


@dataclass(frozen=True)
class DenseBlockSpec:
    in_channels: int
    unit_channels: int
    out_channels: int
    dilations: tuple[int, ...] = DILATIONS

    def __post_init__(self):
        if min(self.in_channels, self.unit_channels, self.out_channels) < 1:
            raise SpecError("channel counts must be positive")
        if tuple(self.dilations) != DILATIONS:
            raise SpecError(f"blocks use exactly three units with dilations {DILATIONS}")

    @property
    def concat_channels(self) -> int:
        """Channel count of the pre-downsample volume."""
        return self.in_channels + len(self.dilations) * self.unit_channels


@dataclass(frozen=True)
class RegressorSpec:
    input_size: tuple[int, int] = (256, 256)
    blocks: tuple[DenseBlockSpec, ...] = ()
    head_conv_channels: int = 32
    n_landmarks: int = N_LANDMARKS

    def __post_init__(self):
        h, w = self.input_size
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise SpecError(f"input_size must be >= 32 and divisible by 32, got {self.input_size}")
        if len(self.blocks) != N_BLOCKS:
            raise SpecError(f"exactly {N_BLOCKS} dense blocks required, got {len(self.blocks)}")
        if self.blocks[0].in_channels != 1:
            raise SpecError("first block must take the single grayscale channel")
        for a, b in zip(self.blocks, self.blocks[1:]):
            if a.out_channels != b.in_channels:
                raise SpecError(
                    f"block chain broken: out {a.out_channels} feeds in {b.in_channels}"
                )
        if self.head_conv_channels < 1:
            raise SpecError("head_conv_channels must be positive")
        if self.n_landmarks != N_LANDMARKS:
            raise SpecError(f"the network regresses exactly {N_LANDMARKS} landmarks")

    @property
    def feature_size(self) -> tuple[int, int]:
        return (self.input_size[0] // 32, self.input_size[1] // 32)

    @classmethod
    def build(cls, input_size: tuple[int, int], base_channels: int, head_conv_channels: int) -> "RegressorSpec":
        """Standard ladder: unit channels double each block, out = 2 * unit."""
        blocks = []
        in_ch = 1
        for k in range(N_BLOCKS):
            unit = base_channels * (2 ** k)
            out = 2 * unit
            blocks.append(DenseBlockSpec(in_ch, unit, out))
            in_ch = out
        return cls(tuple(input_size), tuple(blocks), head_conv_channels)

    @classmethod
    def desk(cls, input_size: tuple[int, int] = (64, 64)) -> "RegressorSpec":
        return cls.build(input_size, base_channels=8, head_conv_channels=32)

    @classmethod
    def full(cls, input_size: tuple[int, int] = (256, 256)) -> "RegressorSpec":
        return cls.build(input_size, base_channels=32, head_conv_channels=64)

    @classmethod
    def tiny(cls, input_size: tuple[int, int] = (32, 32)) -> "RegressorSpec":
        """Constant-width miniature used for gradient checks."""
        blocks = [DenseBlockSpec(1, 4, 8)] + [DenseBlockSpec(8, 4, 8) for _ in range(4)]
        return cls(tuple(input_size), tuple(blocks), head_conv_channels=4)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RegressorSpec":
        d = json.loads(text)
        blocks = tuple(DenseBlockSpec(**{**b, "dilations": tuple(b["dilations"])}) for b in d["blocks"])
        return cls(
            input_size=tuple(d["input_size"]),
            blocks=blocks,
            head_conv_channels=d["head_conv_channels"],
            n_landmarks=d["n_landmarks"],
        )


class _ResidualUnit(nn.Module):
    """conv -> norm -> relu -> conv with an identity or 1x1-projected skip."""

    def __init__(self, in_ch: int, out_ch: int, dilation: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=dilation, dilation=dilation)
        self.norm = nn.InstanceNorm2d(out_ch, affine=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=dilation, dilation=dilation)
        self.proj = None if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        h = self.conv2(torch.relu(self.norm(self.conv1(x))))
        skip = x if self.proj is None else self.proj(x)
        return h + skip


class DilatedDenseBlock(nn.Module):
    def __init__(self, spec: DenseBlockSpec):
        super().__init__()
        self.spec = spec
        units = []
        ch = spec.in_channels
        for d in spec.dilations:
            units.append(_ResidualUnit(ch, spec.unit_channels, d))
            ch += spec.unit_channels
        self.units = nn.ModuleList(units)
        self.down = nn.Conv2d(spec.concat_channels, spec.out_channels, 3, stride=2, padding=1)

    def forward(self, x):
        cat = x
        for unit in self.units:
            cat = torch.cat([cat, unit(cat)], dim=1)
        return self.down(cat)

    def concat_volume(self, x):
        """Pre-downsample feature volume (used by shape-law checks)."""
        cat = x
        for unit in self.units:
            cat = torch.cat([cat, unit(cat)], dim=1)
        return cat


class _LandmarkHead(nn.Module):
    """Per-landmark reduction: 3x3 conv then a fully-connected (x, y) output."""

    def __init__(self, in_ch: int, conv_ch: int, feature_size: tuple[int, int]):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, conv_ch, 3, padding=1)
        self.fc = nn.Linear(conv_ch * feature_size[0] * feature_size[1], 2)

    def forward(self, x):
        h = torch.relu(self.conv(x))
        return self.fc(h.flatten(1))


class RegressorModel(nn.Module):
    """Maps a B x 1 x H x W grayscale batch to B x 10 x 2 pixel coordinates."""

    def __init__(self, spec: RegressorSpec):
        super().__init__()
        self.spec = spec
        self.blocks = nn.ModuleList(DilatedDenseBlock(b) for b in spec.blocks)
        feat = spec.feature_size
        trunk_out = spec.blocks[-1].out_channels
        self.heads = nn.ModuleList(
            _LandmarkHead(trunk_out, spec.head_conv_channels, feat)
            for _ in range(spec.n_landmarks)
        )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.features(x)
        return torch.stack([head(z) for head in self.heads], dim=1)

    def _check_input(self, x: torch.Tensor) -> None:
        h, w = self.spec.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != h or x.shape[3] != w:
            raise ShapeError(
                f"expected input of shape (B, 1, {h}, {w}), got {tuple(x.shape)}"
            )


def _init_tensor(t: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)


def init_params(model: nn.Module, gen: torch.Generator) -> None:
    """Deterministic fan-in-scaled uniform init driven by one generator."""
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            _init_tensor(m.weight, 1.0 / np.sqrt(fan_in), gen)
            if m.bias is not None:
                _init_tensor(m.bias, 1.0 / np.sqrt(fan_in), gen)
        elif isinstance(m, nn.Linear):
            fan_in = m.in_features
            _init_tensor(m.weight, 1.0 / np.sqrt(fan_in), gen)
            if m.bias is not None:
                _init_tensor(m.bias, 1.0 / np.sqrt(fan_in), gen)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


def build_model(spec: RegressorSpec, rng: "int | np.random.Generator") -> RegressorModel:
    """Construct the network with parameters initialised from an explicit seed."""
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63 - 1))
    else:
        seed = int(rng)
    gen = torch.Generator().manual_seed(seed)
    model = RegressorModel(spec)
    init_params(model, gen)
    return model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
