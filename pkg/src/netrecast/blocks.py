"""Block descriptions and their trainable realizations.

Six block kinds cover every architecture family the toolkit handles:

* ``convolution``: conv3x3 -> BN -> ReLU (optionally followed by 2x2 max pooling)
* ``basic``: conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus shortcut, then ReLU
* ``bottleneck``: conv1x1 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv1x1 -> BN,
  plus shortcut, then ReLU
* ``dense``: ``num_layers`` composite layers BN -> ReLU -> conv1x1 -> BN -> ReLU -> conv3x3,
  each concatenated onto the running feature map
* ``transition``: BN -> ReLU -> conv1x1 -> 2x2 average pooling
* ``classifier``: global average pooling -> (hidden linear + ReLU)* -> linear

Convolutions followed by BN carry no bias.  A shortcut is a 1x1 projection
(conv + BN) whenever the block changes width or resolution, identity otherwise.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError, SpecError
from .init import layer_rng, xavier_init
from .optim import ParamSet
from .tensor import Tensor

KINDS = ("convolution", "basic", "bottleneck", "dense", "transition", "classifier")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    growth_rate: int = 0
    num_layers: int = 0
    bottleneck_width: int = 4
    has_projection_shortcut: bool = False
    # bottleneck inner width; 0 means out_channels // 4
    mid_channels: int = 0
    # "max" appends 2x2 max pooling to a convolution block
    pool: str = ""
    # hidden linear widths of a classifier head
    hidden: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown block kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError(f"{self.kind} block needs positive channel counts, got {self.in_channels}->{self.out_channels}")
        if self.stride not in (1, 2):
            raise SpecError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind == "dense":
            if self.growth_rate < 1 or self.num_layers < 1:
                raise SpecError("dense block needs growth_rate >= 1 and num_layers >= 1")
            expect = self.in_channels + self.growth_rate * self.num_layers
            if self.out_channels != expect:
                raise SpecError(
                    f"dense block out_channels must be in + growth*layers = {expect}, got {self.out_channels}"
                )
            if self.stride != 1:
                raise SpecError("dense blocks keep resolution; use a transition to downsample")
        if self.kind in ("basic", "bottleneck"):
            if (self.in_channels != self.out_channels or self.stride != 1) and not self.has_projection_shortcut:
                raise SpecError(
                    f"{self.kind} block {self.in_channels}->{self.out_channels} stride {self.stride} "
                    "needs a projection shortcut"
                )
        if self.kind == "bottleneck" and self.mid < 1:
            raise SpecError("bottleneck inner width must be >= 1")
        if self.pool not in ("", "max"):
            raise SpecError(f"unknown pool {self.pool!r}")
        if self.pool and self.kind != "convolution":
            raise SpecError("only convolution blocks take a pool option")
        if self.kind == "transition" and self.stride != 2:
            object.__setattr__(self, "stride", 2)
        if self.kind == "classifier" and any(h < 1 for h in self.hidden):
            raise SpecError("classifier hidden widths must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def mid(self) -> int:
        return self.mid_channels or max(1, self.out_channels // 4)

    @property
    def downsample(self) -> int:
        """Spatial reduction factor applied by the block."""
        if self.kind == "classifier":
            return 1
        factor = self.stride
        if self.pool == "max":
            factor *= 2
        return factor

    def replace(self, **changes) -> "BlockSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)

    def describe(self) -> str:
        s = f"{self.kind} {self.in_channels}->{self.out_channels}"
        if self.stride != 1 and self.kind != "transition":
            s += f" s{self.stride}"
        if self.kind == "dense":
            s += f" (k={self.growth_rate}, L={self.num_layers})"
        if self.kind == "bottleneck":
            s += f" (mid={self.mid})"
        if self.pool:
            s += " +maxpool"
        if self.has_projection_shortcut:
            s += " +proj"
        return s


def needs_projection(kind: str, in_channels: int, out_channels: int, stride: int) -> bool:
    return kind in ("basic", "bottleneck") and (in_channels != out_channels or stride != 1)


def convolution(cin: int, cout: int, stride: int = 1, pool: str = "") -> BlockSpec:
    return BlockSpec("convolution", cin, cout, stride=stride, pool=pool)


def basic(cin: int, cout: int, stride: int = 1) -> BlockSpec:
    return BlockSpec("basic", cin, cout, stride=stride, has_projection_shortcut=needs_projection("basic", cin, cout, stride))


def bottleneck(cin: int, cout: int, stride: int = 1, mid: int = 0) -> BlockSpec:
    return BlockSpec(
        "bottleneck", cin, cout, stride=stride, mid_channels=mid,
        has_projection_shortcut=needs_projection("bottleneck", cin, cout, stride),
    )


def dense(cin: int, growth: int, layers: int, bottleneck_width: int = 4) -> BlockSpec:
    return BlockSpec(
        "dense", cin, cin + growth * layers, growth_rate=growth, num_layers=layers, bottleneck_width=bottleneck_width
    )


def transition(cin: int, cout: int) -> BlockSpec:
    return BlockSpec("transition", cin, cout, stride=2)


def classifier(features: int, num_classes: int, hidden=()) -> BlockSpec:
    return BlockSpec("classifier", features, num_classes, hidden=tuple(hidden))


# ---------------------------------------------------------------------------
# layer layout shared by Block construction and the cost model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    name: str
    cin: int
    cout: int
    k: int
    stride: int
    padding: int


def conv_layers(spec: BlockSpec) -> list[ConvLayer]:
    """Convolutions of a block in execution order (shortcut last)."""
    k, s = spec.kind, spec.stride
    if k == "convolution":
        return [ConvLayer("conv", spec.in_channels, spec.out_channels, 3, s, 1)]
    if k == "basic":
        layers = [
            ConvLayer("conv1", spec.in_channels, spec.out_channels, 3, s, 1),
            ConvLayer("conv2", spec.out_channels, spec.out_channels, 3, 1, 1),
        ]
    elif k == "bottleneck":
        m = spec.mid
        layers = [
            ConvLayer("conv1", spec.in_channels, m, 1, 1, 0),
            ConvLayer("conv2", m, m, 3, s, 1),
            ConvLayer("conv3", m, spec.out_channels, 1, 1, 0),
        ]
    elif k == "dense":
        width = spec.bottleneck_width * spec.growth_rate
        layers = []
        for i in range(spec.num_layers):
            cin = spec.in_channels + i * spec.growth_rate
            layers.append(ConvLayer(f"layer{i}.conv1", cin, width, 1, 1, 0))
            layers.append(ConvLayer(f"layer{i}.conv2", width, spec.growth_rate, 3, 1, 1))
        return layers
    elif k == "transition":
        return [ConvLayer("conv", spec.in_channels, spec.out_channels, 1, 1, 0)]
    else:
        return []
    if spec.has_projection_shortcut:
        layers.append(ConvLayer("proj", spec.in_channels, spec.out_channels, 1, s, 0))
    return layers


def bn_layers(spec: BlockSpec) -> list[tuple[str, int]]:
    k = spec.kind
    if k == "convolution":
        return [("bn", spec.out_channels)]
    if k == "basic":
        out = [("bn1", spec.out_channels), ("bn2", spec.out_channels)]
    elif k == "bottleneck":
        out = [("bn1", spec.mid), ("bn2", spec.mid), ("bn3", spec.out_channels)]
    elif k == "dense":
        width = spec.bottleneck_width * spec.growth_rate
        return [
            item
            for i in range(spec.num_layers)
            for item in ((f"layer{i}.bn1", spec.in_channels + i * spec.growth_rate), (f"layer{i}.bn2", width))
        ]
    elif k == "transition":
        return [("bn", spec.in_channels)]
    else:
        return []
    if spec.has_projection_shortcut:
        out.append(("proj_bn", spec.out_channels))
    return out


def linear_layers(spec: BlockSpec) -> list[tuple[str, int, int]]:
    if spec.kind != "classifier":
        return []
    dims = [spec.in_channels, *spec.hidden, spec.out_channels]
    names = [f"hidden{i}" for i in range(len(spec.hidden))] + ["fc"]
    return [(n, dims[i], dims[i + 1]) for i, n in enumerate(names)]


# ---------------------------------------------------------------------------
# Block
# ---------------------------------------------------------------------------

class Block:
    """Parameters and forward computation for one :class:`BlockSpec`."""

    def __init__(self, spec: BlockSpec, seed: int = 0, path: tuple = (), dtype=np.float32):
        self.spec = spec
        self.params = ParamSet()
        self.buffers: dict[str, np.ndarray] = {}
        self.dtype = np.dtype(dtype)
        self.bn_momentum = 0.1
        self.bn_eps = 1e-5
        for layer in conv_layers(spec):
            w = Tensor(np.zeros((layer.cout, layer.cin, layer.k, layer.k), dtype=self.dtype))
            xavier_init(w, layer_rng(seed, *path, layer.name))
            self.params.add(f"{layer.name}.weight", w)
        for name, c in bn_layers(spec):
            self.params.add(f"{name}.gamma", Tensor(np.ones(c, dtype=self.dtype)))
            self.params.add(f"{name}.beta", Tensor(np.zeros(c, dtype=self.dtype)))
            self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
            self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)
        for name, d, k in linear_layers(spec):
            w = Tensor(np.zeros((k, d), dtype=self.dtype))
            xavier_init(w, layer_rng(seed, *path, name))
            self.params.add(f"{name}.weight", w)
            self.params.add(f"{name}.bias", Tensor(np.zeros(k, dtype=self.dtype)))

    # -- state ---------------------------------------------------------------
    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in construction order."""
        return [(n, t.data) for n, t in self.params] + list(self.buffers.items())

    def copy(self) -> "Block":
        new = copy.copy(self)
        new.params = ParamSet()
        for n, t in self.params:
            new.params.add(n, Tensor(t.data.copy(), requires_grad=t.requires_grad))
            new.params[n].requires_grad = t.requires_grad
        new.buffers = {n: b.copy() for n, b in self.buffers.items()}
        return new

    def load_from(self, other: "Block") -> None:
        """Copy parameter and buffer values from a block with an identical spec."""
        if other.spec != self.spec:
            raise SpecError(f"cannot copy {other.spec.describe()} into {self.spec.describe()}")
        for n, t in self.params:
            t.data = other.params[n].data.astype(self.dtype, copy=True)
        for n in self.buffers:
            self.buffers[n] = other.buffers[n].astype(self.dtype, copy=True)

    def set_trainable(self, flag: bool) -> None:
        for _, t in self.params:
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def reset_bn_stats(self) -> None:
        for n, b in self.buffers.items():
            b[...] = 0.0 if n.endswith("running_mean") else 1.0

    # -- forward -------------------------------------------------------------
    def _conv(self, name, x, stride=1, padding=1):
        return ops.conv2d(x, self.params[f"{name}.weight"], stride=stride, padding=padding)

    def _bn(self, name, x, training):
        return ops.batchnorm2d(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training,
            momentum=self.bn_momentum,
            eps=self.bn_eps,
        )

    def _shortcut(self, x, training):
        if not self.spec.has_projection_shortcut:
            return x
        return self._bn("proj_bn", self._conv("proj", x, stride=self.spec.stride, padding=0), training)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        s = self.spec
        if s.kind != "classifier" and x.ndim == 4 and x.shape[1] != s.in_channels:
            raise ShapeError(f"{s.describe()} received {x.shape[1]} input channels")
        k = s.kind
        if k == "convolution":
            y = ops.relu(self._bn("bn", self._conv("conv", x, stride=s.stride), training))
            return ops.maxpool2d(y, 2) if s.pool == "max" else y
        if k == "basic":
            y = ops.relu(self._bn("bn1", self._conv("conv1", x, stride=s.stride), training))
            y = self._bn("bn2", self._conv("conv2", y), training)
            return ops.relu(ops.add(y, self._shortcut(x, training)))
        if k == "bottleneck":
            y = ops.relu(self._bn("bn1", self._conv("conv1", x, padding=0), training))
            y = ops.relu(self._bn("bn2", self._conv("conv2", y, stride=s.stride), training))
            y = self._bn("bn3", self._conv("conv3", y, padding=0), training)
            return ops.relu(ops.add(y, self._shortcut(x, training)))
        if k == "dense":
            feats = x
            for i in range(s.num_layers):
                y = ops.relu(self._bn(f"layer{i}.bn1", feats, training))
                y = self._conv(f"layer{i}.conv1", y, padding=0)
                y = ops.relu(self._bn(f"layer{i}.bn2", y, training))
                y = self._conv(f"layer{i}.conv2", y)
                feats = ops.concat_channels([feats, y])
            return feats
        if k == "transition":
            y = ops.relu(self._bn("bn", x, training))
            return ops.avgpool2d(self._conv("conv", y, padding=0), 2)
        # classifier
        y = ops.global_avgpool(x) if x.ndim == 4 else x
        for i in range(len(s.hidden)):
            y = ops.relu(ops.linear(y, self.params[f"hidden{i}.weight"], self.params[f"hidden{i}.bias"]))
        return ops.linear(y, self.params["fc.weight"], self.params["fc.bias"])

    __call__ = forward

    def __repr__(self) -> str:
        return f"Block({self.spec.describe()})"
