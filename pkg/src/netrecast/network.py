"""Networks as ordered block sequences, plus construction helpers.

A :class:`Network` is an optional stem (a convolution block fed by the
image), an ordered list of blocks, and a classifier head.  Its channel chain
and spatial sizes are validated at construction, so every public way of
obtaining a network yields one that can run a forward pass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .blocks import Block, BlockSpec, classifier, needs_projection
from .errors import ShapeError, SpecError, UsageError
from .optim import ParamSet
from .tensor import Tensor


@dataclass
class ArchSpec:
    """Everything needed to build a network except weights and class count."""

    input_shape: tuple[int, int, int]
    blocks: list[BlockSpec]
    stem_channels: int = 0
    classifier_hidden: tuple[int, ...] = field(default_factory=tuple)
    name: str = ""

    def stem_spec(self) -> BlockSpec | None:
        if not self.stem_channels:
            return None
        return BlockSpec("convolution", self.input_shape[0], self.stem_channels)


def _spatial_trace(input_shape, stem: BlockSpec | None, specs: Sequence[BlockSpec]) -> list[tuple[int, int]]:
    """Spatial size entering each block; raises if any block would see an empty map."""
    _, h, w = input_shape
    sizes = []
    chain = ([stem] if stem else []) + list(specs)
    for i, spec in enumerate(chain):
        if stem is not None and i == 0:
            label = "stem"
        else:
            label = f"block {i - (1 if stem else 0)}"
        sizes.append((h, w))
        if spec.kind == "transition" or spec.pool:
            if h < 2 or w < 2:
                raise SpecError(f"{label} ({spec.describe()}) pools a {h}x{w} map")
        if spec.kind in ("convolution", "basic", "bottleneck"):
            h, w = (h - 1) // spec.stride + 1, (w - 1) // spec.stride + 1
            if spec.pool:
                h, w = h // 2, w // 2
        elif spec.kind == "transition":
            h, w = h // 2, w // 2
    sizes.append((h, w))
    return sizes[1:] if stem else sizes


def validate_chain(input_shape, stem: BlockSpec | None, specs: Sequence[BlockSpec], head: BlockSpec) -> None:
    prev = stem.out_channels if stem else input_shape[0]
    prev_label = "stem" if stem else "input"
    if stem and stem.in_channels != input_shape[0]:
        raise SpecError(f"stem expects {stem.in_channels} channels but input has {input_shape[0]}")
    for i, s in enumerate(specs):
        if s.kind == "classifier":
            raise SpecError(f"block {i}: classifier may only appear as the head")
        if s.in_channels != prev:
            raise SpecError(f"block {i} ({s.describe()}) expects {s.in_channels} channels but {prev_label} outputs {prev}")
        prev, prev_label = s.out_channels, f"block {i}"
    if head.kind != "classifier":
        raise SpecError("network head must be a classifier block")
    if head.in_channels != prev:
        raise SpecError(f"classifier expects {head.in_channels} features but {prev_label} outputs {prev}")
    _spatial_trace(input_shape, stem, specs)


def _is_channels_last(a: np.ndarray) -> bool:
    return a.ndim == 4 and a.transpose(0, 2, 3, 1).flags.c_contiguous


class Network:
    """Stem, ordered blocks, and classifier head."""

    def __init__(self, input_shape, stem: Block | None, blocks: list[Block], head: Block, name: str = ""):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.stem = stem
        self.blocks = list(blocks)
        self.classifier = head
        self.name = name
        self.validate()

    # -- structure ------------------------------------------------------------
    def validate(self) -> None:
        validate_chain(
            self.input_shape, self.stem.spec if self.stem else None, [b.spec for b in self.blocks], self.classifier.spec
        )

    @property
    def specs(self) -> list[BlockSpec]:
        return [b.spec for b in self.blocks]

    @property
    def num_classes(self) -> int:
        return self.classifier.spec.out_channels

    def arch(self) -> ArchSpec:
        return ArchSpec(
            self.input_shape,
            self.specs,
            self.stem.spec.out_channels if self.stem else 0,
            self.classifier.spec.hidden,
            self.name,
        )

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """Spatial size entering each block, then entering the classifier."""
        return _spatial_trace(self.input_shape, self.stem.spec if self.stem else None, self.specs)

    def all_blocks(self) -> list[tuple[str, Block]]:
        out = [("stem", self.stem)] if self.stem else []
        out += [(f"blocks.{i}", b) for i, b in enumerate(self.blocks)]
        out.append(("classifier", self.classifier))
        return out

    def params(self) -> ParamSet:
        ps = ParamSet()
        for prefix, blk in self.all_blocks():
            for n, t in blk.params:
                ps._params[f"{prefix}.{n}"] = t
        return ps

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{prefix}.{n}", a) for prefix, blk in self.all_blocks() for n, a in blk.state_items()]

    def copy(self) -> "Network":
        return Network(
            self.input_shape,
            self.stem.copy() if self.stem else None,
            [b.copy() for b in self.blocks],
            self.classifier.copy(),
            self.name,
        )

    def set_trainable(self, flag: bool) -> None:
        for _, blk in self.all_blocks():
            blk.set_trainable(flag)

    # -- forward ---------------------------------------------------------------
    def prepare_input(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.ndim != 4 or tuple(data.shape[1:]) != self.input_shape:
            raise ShapeError(f"network expects input (B, {', '.join(map(str, self.input_shape))}), got {data.shape}")
        if data.dtype.kind != "f":
            data = data.astype(np.float32)
        if not _is_channels_last(data):
            data = ops.channels_last(data)
        return x if isinstance(x, Tensor) and data is x.data else Tensor(data)

    def forward(self, x, mode: str = "eval", taps: Iterable[int] = ()) -> tuple[Tensor, dict[int, Tensor]]:
        """Run the network; return logits and the requested block outputs.

        Tap ``i`` is the tensor leaving block ``i`` (what block ``i + 1``, or the
        classifier, receives).
        """
        if mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
        taps = sorted(set(int(t) for t in taps))
        for t in taps:
            if not 0 <= t < len(self.blocks):
                raise UsageError(f"tap index {t} out of range for a network with {len(self.blocks)} blocks")
        training = mode == "train"
        h = self.prepare_input(x)
        if self.stem:
            h = self.stem(h, training)
        tapped: dict[int, Tensor] = {}
        want = set(taps)
        for i, blk in enumerate(self.blocks):
            h = blk(h, training)
            if i in want:
                tapped[i] = h
        return self.classifier(h, training), tapped

    def __call__(self, x, mode: str = "eval") -> Tensor:
        return self.forward(x, mode)[0]

    def __repr__(self) -> str:
        return f"Network({self.name or 'custom'}: {len(self.blocks)} blocks, {self.num_classes} classes)"

    def summary(self) -> str:
        lines = [f"input {self.input_shape}"]
        for prefix, blk in self.all_blocks():
            lines.append(f"{prefix:<12} {blk.spec.describe()}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_from_arch(arch: ArchSpec, num_classes: int, rng_seed: int = 0, dtype=np.float32) -> Network:
    stem_spec = arch.stem_spec()
    last = arch.blocks[-1].out_channels if arch.blocks else (stem_spec.out_channels if stem_spec else arch.input_shape[0])
    head_spec = classifier(last, num_classes, arch.classifier_hidden)
    validate_chain(arch.input_shape, stem_spec, arch.blocks, head_spec)
    stem = Block(stem_spec, rng_seed, ("stem",), dtype) if stem_spec else None
    blocks = [Block(s, rng_seed, ("block", i), dtype) for i, s in enumerate(arch.blocks)]
    head = Block(head_spec, rng_seed, ("classifier",), dtype)
    return Network(arch.input_shape, stem, blocks, head, arch.name)


def build_network(arch, num_classes: int = 10, rng_seed: int = 0, input_shape=None, dtype=np.float32) -> Network:
    """Build and Xavier-initialize a network.

    ``arch`` is a preset name (see :data:`netrecast.presets.PRESETS`), an
    :class:`ArchSpec`, or an explicit list of :class:`BlockSpec` chained from
    the input channels (no stem).
    """
    from .presets import get_preset

    if isinstance(arch, str):
        spec = get_preset(arch)
        if input_shape is not None:
            spec = dataclasses.replace(spec, input_shape=tuple(input_shape))
    elif isinstance(arch, ArchSpec):
        spec = arch if input_shape is None else dataclasses.replace(arch, input_shape=tuple(input_shape))
    else:
        blocks = list(arch)
        if not blocks:
            raise SpecError("explicit architecture needs at least one block")
        if input_shape is None:
            input_shape = (blocks[0].in_channels, 32, 32)
        spec = ArchSpec(tuple(input_shape), blocks)
    return build_from_arch(spec, num_classes, rng_seed, dtype)


def rebuild_next_block(source_next: BlockSpec, new_in_channels: int) -> BlockSpec:
    """Copy of ``source_next`` whose filters accept ``new_in_channels`` inputs."""
    if new_in_channels < 1:
        raise SpecError(f"new_in_channels must be >= 1, got {new_in_channels}")
    changes: dict = {"in_channels": new_in_channels}
    if source_next.kind in ("basic", "bottleneck"):
        if needs_projection(source_next.kind, new_in_channels, source_next.out_channels, source_next.stride):
            changes["has_projection_shortcut"] = True
        if source_next.kind == "bottleneck" and not source_next.mid_channels:
            changes["mid_channels"] = source_next.mid
    elif source_next.kind == "dense":
        changes["out_channels"] = new_in_channels + source_next.growth_rate * source_next.num_layers
    return source_next.replace(**changes)


# ---------------------------------------------------------------------------
# architecture text files
# ---------------------------------------------------------------------------

_KIND_ALIASES = {"conv": "convolution", "convolution": "convolution", "basic": "basic", "bottleneck": "bottleneck",
                 "dense": "dense", "transition": "transition"}


def parse_arch(text: str, name: str = "") -> ArchSpec:
    """Parse the one-block-per-line architecture format.

    ::

        input 3 16 16
        stem 16
        basic 16 1
        basic 32 2
        convolution 64 1 pool=max
        bottleneck 64 1 mid=16
        dense - 1 growth=8 layers=6
        transition 32
        classifier hidden=512

    ``kind channels stride [key=value ...]``; input channels of every block are
    inferred from the previous line.  ``#`` starts a comment.
    """
    input_shape = None
    stem = 0
    hidden: tuple[int, ...] = ()
    blocks: list[BlockSpec] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        head, args = words[0].lower(), words[1:]
        pos = [a for a in args if "=" not in a]
        kv = dict(a.split("=", 1) for a in args if "=" in a)
        try:
            if head == "input":
                input_shape = tuple(int(v) for v in pos[:3])
                if len(input_shape) != 3:
                    raise ValueError("input needs C H W")
                continue
            if input_shape is None:
                raise SpecError(f"line {lineno}: 'input C H W' must come first")
            if head == "stem":
                stem = int(pos[0])
                continue
            if head == "classifier":
                h = kv.get("hidden", "")
                hidden = tuple(int(v) for v in h.split(",") if v)
                continue
            kind = _KIND_ALIASES.get(head)
            if kind is None:
                raise SpecError(f"line {lineno}: unknown block kind {head!r}")
            prev = blocks[-1].out_channels if blocks else (stem or input_shape[0])
            stride = int(pos[1]) if len(pos) > 1 else 1
            if kind == "dense":
                g, n = int(kv["growth"]), int(kv["layers"])
                out = prev + g * n
                if pos and pos[0] != "-" and int(pos[0]) != out:
                    raise SpecError(f"line {lineno}: dense output must be {out}, got {pos[0]}")
                blocks.append(BlockSpec("dense", prev, out, growth_rate=g, num_layers=n,
                                        bottleneck_width=int(kv.get("bw", 4))))
                continue
            out = int(pos[0])
            if kind == "transition":
                blocks.append(BlockSpec("transition", prev, out, stride=2))
            elif kind == "convolution":
                blocks.append(BlockSpec("convolution", prev, out, stride=stride, pool=kv.get("pool", "")))
            else:
                blocks.append(BlockSpec(
                    kind, prev, out, stride=stride, mid_channels=int(kv.get("mid", 0)),
                    has_projection_shortcut=needs_projection(kind, prev, out, stride) or kv.get("proj") == "1",
                ))
        except (IndexError, KeyError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"line {lineno}: cannot parse {raw.strip()!r} ({exc})") from exc
    if input_shape is None:
        raise SpecError("architecture file has no 'input' line")
    if not blocks:
        raise SpecError("architecture file declares no blocks")
    return ArchSpec(input_shape, blocks, stem, hidden, name)


def format_arch(arch: ArchSpec) -> str:
    lines = [f"input {' '.join(map(str, arch.input_shape))}"]
    if arch.stem_channels:
        lines.append(f"stem {arch.stem_channels}")
    for s in arch.blocks:
        if s.kind == "dense":
            lines.append(f"dense {s.out_channels} 1 growth={s.growth_rate} layers={s.num_layers} bw={s.bottleneck_width}")
        elif s.kind == "transition":
            lines.append(f"transition {s.out_channels}")
        else:
            extra = []
            if s.pool:
                extra.append(f"pool={s.pool}")
            if s.kind == "bottleneck" and s.mid_channels:
                extra.append(f"mid={s.mid_channels}")
            if s.has_projection_shortcut and not needs_projection(s.kind, s.in_channels, s.out_channels, s.stride):
                extra.append("proj=1")
            lines.append(" ".join([s.kind, str(s.out_channels), str(s.stride), *extra]))
    if arch.classifier_hidden:
        lines.append("classifier hidden=" + ",".join(map(str, arch.classifier_hidden)))
    return "\n".join(lines) + "\n"
