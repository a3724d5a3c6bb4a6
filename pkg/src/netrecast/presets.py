"""Named architectures.

CIFAR-scale presets follow the standard published topologies for 32x32
inputs.  The ``mini-*`` and ``deep-*`` presets are small 16x16 networks sized
for CPU-only experiments.
"""

from __future__ import annotations

import re

from .blocks import BlockSpec, basic, bottleneck, convolution, dense, transition
from .errors import SpecError
from .network import ArchSpec

CIFAR = (3, 32, 32)
DESK = (3, 16, 16)


def _staged(make, stem: int, widths, per_stage: int) -> list[BlockSpec]:
    blocks = []
    prev = stem
    for stage, w in enumerate(widths):
        for i in range(per_stage):
            stride = 2 if stage > 0 and i == 0 else 1
            blocks.append(make(prev, w, stride))
            prev = w
    return blocks


def resnet(depth: int, input_shape=CIFAR) -> ArchSpec:
    """CIFAR ResNet with basic blocks: stem 16, 3 stages at 16/32/64."""
    if (depth - 2) % 6:
        raise SpecError(f"basic-block CIFAR ResNet depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    return ArchSpec(input_shape, _staged(basic, 16, (16, 32, 64), n), 16, name=f"resnet{depth}")


def resnet_bottleneck(depth: int, input_shape=CIFAR) -> ArchSpec:
    """CIFAR ResNet with bottleneck blocks, inner widths 16/32/64 and 4x expansion."""
    if (depth - 2) % 9:
        raise SpecError(f"bottleneck CIFAR ResNet depth must be 9n+2, got {depth}")
    n = (depth - 2) // 9
    blocks = _staged(lambda i, o, s: bottleneck(i, o, s, mid=o // 4), 16, (64, 128, 256), n)
    return ArchSpec(input_shape, blocks, 16, name=f"resnet{depth}")


def wide_resnet(depth: int, k: int, input_shape=CIFAR) -> ArchSpec:
    if (depth - 4) % 6:
        raise SpecError(f"WRN depth must be 6n+4, got {depth}")
    n = (depth - 4) // 6
    return ArchSpec(input_shape, _staged(basic, 16, (16 * k, 32 * k, 64 * k), n), 16, name=f"wrn-{depth}-{k}")


def densenet_bc(depth: int, growth: int = 12, input_shape=CIFAR, compression: float = 0.5) -> ArchSpec:
    """DenseNet-BC: three dense blocks of (depth-4)/6 bottleneck layers."""
    if (depth - 4) % 6:
        raise SpecError(f"DenseNet-BC depth must be 6n+4, got {depth}")
    layers = (depth - 4) // 6
    c = 2 * growth
    blocks: list[BlockSpec] = []
    for i in range(3):
        d = dense(c, growth, layers)
        blocks.append(d)
        c = d.out_channels
        if i < 2:
            out = int(c * compression)
            blocks.append(transition(c, out))
            c = out
    return ArchSpec(input_shape, blocks, 2 * growth, name=f"densenet{depth}")


def vgg16(input_shape=CIFAR) -> ArchSpec:
    """VGG-16 for CIFAR with a single 512-unit hidden fully-connected layer."""
    cfg = [64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
    blocks: list[BlockSpec] = []
    prev = 64
    for i, v in enumerate(cfg):
        if v == "M":
            continue
        pool = "max" if i + 1 < len(cfg) and cfg[i + 1] == "M" else ""
        blocks.append(convolution(prev, v, pool=pool))
        prev = v
    return ArchSpec(input_shape, blocks, 64, classifier_hidden=(512,), name="vgg16")


def mini_resnet() -> ArchSpec:
    return ArchSpec(DESK, _staged(basic, 16, (16, 32), 3), 16, name="mini-resnet")


def mini_densenet() -> ArchSpec:
    d1 = dense(16, 8, 6)
    t = transition(d1.out_channels, d1.out_channels // 2)
    d2 = dense(t.out_channels, 8, 6)
    return ArchSpec(DESK, [d1, t, d2], 16, name="mini-densenet")


def mini_convnet() -> ArchSpec:
    widths = [(32, 1), (32, 1), (32, 1), (64, 2), (64, 1), (64, 1)]
    blocks, prev = [], 16
    for w, s in widths:
        blocks.append(convolution(prev, w, s))
        prev = w
    return ArchSpec(DESK, blocks, 16, name="mini-convnet")


def deep_resnet() -> ArchSpec:
    return ArchSpec(DESK, _staged(basic, 8, (8, 16), 6), 8, name="deep-resnet")


def tiny_resnet() -> ArchSpec:
    return ArchSpec((3, 8, 8), [basic(8, 8), basic(8, 8)], 8, name="tiny-resnet")


PRESETS = {
    "resnet20": lambda: resnet(20),
    "resnet56": lambda: resnet(56),
    "resnet110": lambda: resnet(110),
    "resnet83": lambda: resnet_bottleneck(83),
    "wrn-28-10": lambda: wide_resnet(28, 10),
    "densenet100": lambda: densenet_bc(100, 12),
    "vgg16": vgg16,
    "mini-resnet": mini_resnet,
    "mini-densenet": mini_densenet,
    "mini-convnet": mini_convnet,
    "deep-resnet": deep_resnet,
    "tiny-resnet": tiny_resnet,
}


def get_preset(name: str) -> ArchSpec:
    key = name.lower().replace("_", "-")
    key = {"resnet-56": "resnet56", "resnet-83": "resnet83", "densenet-100": "densenet100",
           "vgg-16": "vgg16", "wrn28-10": "wrn-28-10"}.get(key, key)
    if key in PRESETS:
        return PRESETS[key]()
    m = re.fullmatch(r"resnet-?(\d+)", key)
    if m:
        return resnet(int(m.group(1)))
    m = re.fullmatch(r"wrn-(\d+)-(\d+)", key)
    if m:
        return wide_resnet(int(m.group(1)), int(m.group(2)))
    raise SpecError(f"unknown architecture preset {name!r}; known: {', '.join(sorted(PRESETS))}")
