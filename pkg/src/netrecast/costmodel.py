"""Analytic inference cost: parameters, multiplications and activation loads.

Headline totals follow the convolution-only convention (conv weights, conv
multiplications, conv input reads for one image).  Linear layers, batch-norm
affine parameters and the output-write convention for activations are
carried in every :class:`CostReport` so the full picture stays inspectable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blocks import BlockSpec, bn_layers, conv_layers, linear_layers
from .network import ArchSpec, Network, _spatial_trace


@dataclass
class BlockCost:
    name: str
    kind: str
    params: int = 0
    mults: int = 0
    act_reads: int = 0
    act_writes: int = 0
    linear_params: int = 0
    linear_mults: int = 0
    linear_reads: int = 0
    bn_params: int = 0


@dataclass
class CostReport:
    input_shape: tuple[int, int, int]
    blocks: list[BlockCost] = field(default_factory=list)

    def _total(self, attr: str) -> int:
        return sum(getattr(b, attr) for b in self.blocks)

    @property
    def params(self) -> int:
        return self._total("params")

    @property
    def mults(self) -> int:
        return self._total("mults")

    @property
    def act_load_per_image(self) -> int:
        return self._total("act_reads")

    @property
    def act_writes(self) -> int:
        return self._total("act_writes")

    @property
    def bn_params(self) -> int:
        return self._total("bn_params")

    @property
    def linear_params(self) -> int:
        return self._total("linear_params")

    @property
    def linear_mults(self) -> int:
        return self._total("linear_mults")

    def totals(self, include_linear: bool = False) -> dict[str, int]:
        t = {
            "params": self.params,
            "mults": self.mults,
            "act_load_per_image": self.act_load_per_image,
            "act_writes_per_image": self.act_writes,
        }
        if include_linear:
            t["params"] += self.linear_params
            t["mults"] += self.linear_mults
            t["act_load_per_image"] += self._total("linear_reads")
        return t


def _as_arch(net) -> tuple[ArchSpec, BlockSpec]:
    if isinstance(net, Network):
        return net.arch(), net.classifier.spec
    if isinstance(net, str):
        from .presets import get_preset
        net = get_preset(net)
    if isinstance(net, ArchSpec):
        from .blocks import classifier
        last = net.blocks[-1].out_channels if net.blocks else net.stem_channels
        return net, classifier(last, 10, net.classifier_hidden)
    raise TypeError(f"cannot analyze {type(net).__name__}")


def _block_cost(name: str, spec: BlockSpec, hw: tuple[int, int]) -> BlockCost:
    bc = BlockCost(name, spec.kind)
    h0, w0 = hw
    h, w = hw
    for layer in conv_layers(spec):
        hi, wi = (h0, w0) if layer.name == "proj" else (h, w)
        ho = (hi + 2 * layer.padding - layer.k) // layer.stride + 1
        wo = (wi + 2 * layer.padding - layer.k) // layer.stride + 1
        bc.params += layer.cout * layer.cin * layer.k * layer.k
        bc.mults += layer.cout * layer.cin * layer.k * layer.k * ho * wo
        bc.act_reads += layer.cin * hi * wi
        bc.act_writes += layer.cout * ho * wo
        if spec.kind == "dense":
            continue  # every dense layer runs at block resolution
        if layer.name != "proj":
            h, w = ho, wo
    for _, c in bn_layers(spec):
        bc.bn_params += 2 * c
    for _, d, k in linear_layers(spec):
        bc.linear_params += d * k
        bc.linear_mults += d * k
        bc.linear_reads += d
    return bc


def cost_report(net, input_shape=None) -> CostReport:
    """Per-block costs for one image.  ``net`` is a Network, ArchSpec or preset name."""
    arch, head = _as_arch(net)
    shape = tuple(input_shape) if input_shape is not None else arch.input_shape
    if len(shape) == 4:
        shape = shape[1:]
    stem = arch.stem_spec()
    if stem is not None and stem.in_channels != shape[0]:
        stem = stem.replace(in_channels=shape[0])
    sizes = _spatial_trace(shape, stem, arch.blocks)
    report = CostReport(tuple(shape))
    if stem is not None:
        report.blocks.append(_block_cost("stem", stem, tuple(shape[1:])))
    for i, spec in enumerate(arch.blocks):
        report.blocks.append(_block_cost(f"blocks.{i}", spec, sizes[i]))
    report.blocks.append(_block_cost("classifier", head, sizes[-1]))
    return report


def count_params(net, include_linear: bool = False) -> int:
    r = cost_report(net)
    return r.params + (r.linear_params if include_linear else 0)


def count_mults(net, input_shape=None, include_linear: bool = False) -> int:
    r = cost_report(net, input_shape)
    return r.mults + (r.linear_mults if include_linear else 0)


def count_activation_load(net, input_shape=None, convention: str = "reads") -> int:
    r = cost_report(net, input_shape)
    if convention == "reads":
        return r.act_load_per_image
    if convention == "writes":
        return r.act_writes
    raise ValueError(f"unknown activation convention {convention!r}")


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------

def human(n: float) -> str:
    for unit, scale in (("B", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.2f}{unit}"
    return str(int(n))


def format_text(report: CostReport, title: str = "", baseline: CostReport | None = None) -> str:
    rows = [f"{'block':<14}{'kind':<13}{'params':>12}{'mults':>15}{'act_reads':>12}{'act_writes':>12}"]
    for b in report.blocks:
        rows.append(f"{b.name:<14}{b.kind:<13}{b.params:>12}{b.mults:>15}{b.act_reads:>12}{b.act_writes:>12}")
    t = report.totals()
    rows.append("-" * len(rows[0]))
    rows.append(f"{'total':<27}{t['params']:>12}{t['mults']:>15}{t['act_load_per_image']:>12}{t['act_writes_per_image']:>12}")
    summary = [
        f"params (conv)        {human(t['params'])}",
        f"mults (conv)         {human(t['mults'])}",
        f"acts/image (reads)   {human(t['act_load_per_image'])}",
        f"acts/image (writes)  {human(t['act_writes_per_image'])}",
        f"linear params        {report.linear_params}",
        f"bn affine params     {report.bn_params}",
    ]
    if baseline is not None:
        bt = baseline.totals()
        for key in ("params", "mults", "act_load_per_image"):
            ratio = bt[key] / t[key] if t[key] else float("inf")
            summary.append(f"{key} reduction  {ratio:.2f}x")
    head = [title] if title else []
    return "\n".join(head + rows + [""] + summary) + "\n"


def format_kv(report: CostReport) -> str:
    t = report.totals()
    full = report.totals(include_linear=True)
    lines = [f"input_shape = {','.join(map(str, report.input_shape))}"]
    lines += [f"{k} = {v}" for k, v in t.items()]
    lines += [f"full_{k} = {v}" for k, v in full.items()]
    lines += [f"bn_params = {report.bn_params}", f"linear_params = {report.linear_params}"]
    for b in report.blocks:
        for attr in ("params", "mults", "act_reads", "act_writes", "linear_params", "bn_params"):
            lines.append(f"{b.name}.{attr} = {getattr(b, attr)}")
        lines.append(f"{b.name}.kind = {b.kind}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
