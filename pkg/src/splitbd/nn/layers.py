"""Layer specification vocabulary.

Architectures are described as flat tuples of small frozen dataclasses; each
spec maps to exactly one torch module via to_module(), and out_shape() does
the static shape arithmetic so a bad architecture fails at build time rather
than mid-training.
"""

from dataclasses import dataclass

import torch.nn as nn

from ..errors import ConfigurationError


@dataclass(frozen=True)
class Conv:
    cin: int
    cout: int
    k: int = 3
    stride: int = 1
    pad: int = 1
    groups: int = 1


@dataclass(frozen=True)
class BatchNorm:
    ch: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class LeakyReLU:
    slope: float = 0.2


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int = 0  # 0 means "same as k"
    pad: int = 0


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    din: int
    dout: int


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class Residual:
    """Basic two-conv residual block with identity skip; shape preserving."""

    ch: int


@dataclass(frozen=True)
class Bottleneck:
    """1x1 -> 3x3 (optionally grouped/strided) -> 1x1 residual block."""

    cin: int
    mid: int
    cout: int
    stride: int = 1
    groups: int = 1


class ResidualModule(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False),
            nn.BatchNorm2d(ch),
            nn.ReLU(),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False),
            nn.BatchNorm2d(ch),
        )
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.body(x) + x)


class BottleneckModule(nn.Module):
    def __init__(self, cin, mid, cout, stride, groups):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, mid, 1, 1, 0, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(),
            nn.Conv2d(mid, mid, 3, stride, 1, groups=groups, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(),
            nn.Conv2d(mid, cout, 1, 1, 0, bias=False),
            nn.BatchNorm2d(cout),
        )
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, 0, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.skip = nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.body(x) + self.skip(x))


def to_module(spec):
    """Instantiate the torch module for one layer spec."""
    if isinstance(spec, Conv):
        return nn.Conv2d(spec.cin, spec.cout, spec.k, spec.stride, spec.pad, groups=spec.groups)
    if isinstance(spec, BatchNorm):
        return nn.BatchNorm2d(spec.ch)
    if isinstance(spec, ReLU):
        return nn.ReLU()
    if isinstance(spec, LeakyReLU):
        return nn.LeakyReLU(spec.slope)
    if isinstance(spec, MaxPool):
        return nn.MaxPool2d(spec.k, spec.stride or spec.k, spec.pad)
    if isinstance(spec, GlobalAvgPool):
        return nn.AdaptiveAvgPool2d(1)
    if isinstance(spec, Flatten):
        return nn.Flatten()
    if isinstance(spec, Linear):
        return nn.Linear(spec.din, spec.dout)
    if isinstance(spec, Sigmoid):
        return nn.Sigmoid()
    if isinstance(spec, Residual):
        return ResidualModule(spec.ch)
    if isinstance(spec, Bottleneck):
        return BottleneckModule(spec.cin, spec.mid, spec.cout, spec.stride, spec.groups)
    raise ConfigurationError(f"unknown layer spec {spec!r}")


def _need_spatial(spec, shape):
    if len(shape) != 3:
        raise ConfigurationError(f"{type(spec).__name__} needs a [C, H, W] input, got {shape}")


def _conv_hw(h, w, k, stride, pad):
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"spatial size {h}x{w} too small for k={k} pad={pad}")
    return oh, ow


def out_shape(spec, shape):
    """Shape produced by `spec` applied to input `shape` (no batch dim)."""
    if isinstance(spec, Conv):
        _need_spatial(spec, shape)
        if shape[0] != spec.cin:
            raise ConfigurationError(f"Conv expects {spec.cin} channels, input has {shape[0]}")
        oh, ow = _conv_hw(shape[1], shape[2], spec.k, spec.stride, spec.pad)
        return (spec.cout, oh, ow)
    if isinstance(spec, BatchNorm):
        _need_spatial(spec, shape)
        if shape[0] != spec.ch:
            raise ConfigurationError(f"BatchNorm expects {spec.ch} channels, input has {shape[0]}")
        return shape
    if isinstance(spec, (ReLU, LeakyReLU)):
        return shape
    if isinstance(spec, Sigmoid):
        return shape
    if isinstance(spec, MaxPool):
        _need_spatial(spec, shape)
        oh, ow = _conv_hw(shape[1], shape[2], spec.k, spec.stride or spec.k, spec.pad)
        return (shape[0], oh, ow)
    if isinstance(spec, GlobalAvgPool):
        _need_spatial(spec, shape)
        return (shape[0], 1, 1)
    if isinstance(spec, Flatten):
        n = 1
        for d in shape:
            n *= d
        return (n,)
    if isinstance(spec, Linear):
        if len(shape) != 1:
            raise ConfigurationError(f"Linear needs a flat input, got {shape}")
        if shape[0] != spec.din:
            raise ConfigurationError(f"Linear expects {spec.din} features, input has {shape[0]}")
        return (spec.dout,)
    if isinstance(spec, Residual):
        _need_spatial(spec, shape)
        if shape[0] != spec.ch:
            raise ConfigurationError(f"Residual expects {spec.ch} channels, input has {shape[0]}")
        return shape
    if isinstance(spec, Bottleneck):
        _need_spatial(spec, shape)
        if shape[0] != spec.cin:
            raise ConfigurationError(f"Bottleneck expects {spec.cin} channels, input has {shape[0]}")
        oh, ow = _conv_hw(shape[1], shape[2], 3, spec.stride, 1)
        return (spec.cout, oh, ow)
    raise ConfigurationError(f"unknown layer spec {spec!r}")


def chain_shape(specs, in_shape):
    shape = tuple(in_shape)
    for spec in specs:
        shape = out_shape(spec, shape)
    return shape
