"""Block-wise recasting of a teacher network into a student.

A :class:`RecastPlan` says, for every teacher block, whether it is kept or
replaced by a block of another kind/width.  :func:`sequential_recast` walks
the plan front to back; each step trains the new target block together with
the (rebuilt) block after it so that the pair reproduces the teacher's
activation leaving that next block.  :func:`kd_finetune` then trains the whole
student on the distillation objective.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .blocks import Block, BlockSpec, basic, classifier, convolution, transition
from .data import BatchStream
from .errors import PlanError, ShapeError, SpecError, UsageError
from .losses import kd_loss, mse_activation_loss
from .network import ArchSpec, Network, rebuild_next_block, validate_chain
from .optim import OptimizerConfig, ParamSet, optimizer_step
from .tensor import Tensor, backward, no_grad
from .training import TrainResult, refresh_bn_stats, train_kd

log = logging.getLogger(__name__)

__all__ = [
    "PlanEntry", "RecastPlan", "RecastConfig", "StepRecord", "RecastResult", "RECAST_PAIRS",
    "parse_plan", "format_plan", "validate_plan", "student_specs", "plan_arch", "build_student",
    "recast_block_step", "sequential_recast", "kd_finetune", "make_compression_plan",
    "mse_activation_loss", "kd_loss",
]

# (source kind, target kind) -> how the output width may change
RECAST_PAIRS = {
    ("dense", "basic"): "preserved",
    ("dense", "convolution"): "preserved",
    ("basic", "convolution"): "preserved",
    ("bottleneck", "convolution"): "reduced",
    ("basic", "basic"): "reduced",
    ("convolution", "convolution"): "reduced",
}


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanEntry:
    action: str = "keep"  # keep | recast
    kind: str = ""
    out_channels: int = 0  # 0: the default width for the pair

    def __post_init__(self):
        if self.action not in ("keep", "recast"):
            raise PlanError(f"plan action must be keep or recast, got {self.action!r}")
        if self.action == "recast" and not self.kind:
            raise PlanError("a recast entry needs a target kind")

    def format(self) -> str:
        if self.action == "keep":
            return "keep"
        return f"recast {self.kind} {self.out_channels}" if self.out_channels else f"recast {self.kind}"


@dataclass
class RecastPlan:
    entries: list[PlanEntry]
    width_multiplier: float | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def recast_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.action == "recast"]

    @classmethod
    def keep_all(cls, n: int) -> "RecastPlan":
        return cls([PlanEntry()] * n)

    @classmethod
    def all_to(cls, net: Network, kind: str) -> "RecastPlan":
        """Recast every block whose pair is allowed to become ``kind``; keep the rest."""
        entries = []
        for b in net.blocks:
            ok = (b.spec.kind, kind) in RECAST_PAIRS
            entries.append(PlanEntry("recast", kind) if ok else PlanEntry())
        return cls(entries)


_KINDS = {"conv": "convolution", "convolution": "convolution", "basic": "basic", "bottleneck": "bottleneck",
          "dense": "dense", "transition": "transition"}
_LINE = re.compile(r"^block\s+(\d+)\s*:\s*(keep|recast)(?:\s+(\w+))?(?:\s+(\d+))?\s*$")


def parse_plan(text: str) -> RecastPlan:
    """Parse ``block <i>: keep | recast <kind> <out_channels>`` lines.

    Blank lines and ``#`` comments are ignored; ``width_multiplier: r`` is
    an optional global line.  Indices must run 0..n-1 in order.
    """
    entries: list[PlanEntry] = []
    r = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("width_multiplier"):
            try:
                r = float(line.split(":", 1)[1])
            except (IndexError, ValueError) as exc:
                raise PlanError(f"line {lineno}: bad width_multiplier line {raw!r}") from exc
            continue
        m = _LINE.match(line)
        if not m:
            raise PlanError(f"line {lineno}: cannot parse {raw!r}")
        idx, action, kind, out = int(m.group(1)), m.group(2), m.group(3), m.group(4)
        if idx != len(entries):
            raise PlanError(f"line {lineno}: expected block {len(entries)}, got block {idx}")
        if action == "keep":
            if kind:
                raise PlanError(f"line {lineno}: keep takes no arguments")
            entries.append(PlanEntry())
            continue
        if kind is None or kind not in _KINDS:
            raise PlanError(f"line {lineno}: unknown target kind {kind!r}")
        entries.append(PlanEntry("recast", _KINDS[kind], int(out) if out else 0))
    return RecastPlan(entries, r)


def format_plan(plan: RecastPlan) -> str:
    lines = [f"block {i}: {e.format()}" for i, e in enumerate(plan.entries)]
    if plan.width_multiplier is not None:
        lines.append(f"width_multiplier: {plan.width_multiplier:g}")
    return "\n".join(lines) + "\n"


def _default_width(src: BlockSpec, kind: str) -> int:
    if src.kind == "bottleneck" and kind == "convolution":
        return src.mid
    return src.out_channels


def _target_spec(i: int, src: BlockSpec, entry: PlanEntry, cin: int) -> BlockSpec:
    kind = entry.kind
    out = entry.out_channels or _default_width(src, kind)
    if out < 1:
        raise PlanError(f"block {i}: target width must be positive")
    if kind == src.kind and out == src.out_channels:
        rule = "same"
    else:
        rule = RECAST_PAIRS.get((src.kind, kind))
        if rule is None:
            raise PlanError(f"block {i}: {src.kind} -> {kind} is not an allowed recasting pair")
        if rule == "preserved" and out != src.out_channels:
            raise PlanError(
                f"block {i}: {src.kind} -> {kind} preserves the output width ({src.out_channels}), got {out}"
            )
        if rule == "reduced" and out > src.out_channels:
            raise PlanError(f"block {i}: {src.kind} -> {kind} may only reduce the width ({src.out_channels}), got {out}")
    try:
        if kind == "convolution":
            return convolution(cin, out, src.stride, src.pool if src.kind == "convolution" else "")
        if kind == "basic":
            return basic(cin, out, src.stride)
        if kind == "transition":
            return transition(cin, out)
        spec = rebuild_next_block(src, cin)  # same-kind same-size bottleneck or dense
    except SpecError as exc:
        raise PlanError(f"block {i}: {exc}") from exc
    if spec.out_channels != src.out_channels:
        raise PlanError(f"block {i}: a rebuilt {src.kind} block would change its output width")
    return spec


def _layout(net) -> tuple[tuple, BlockSpec | None, list[BlockSpec], BlockSpec]:
    """(input shape, stem spec, block specs, classifier spec) of a Network or ArchSpec."""
    if isinstance(net, Network):
        return net.input_shape, net.stem.spec if net.stem else None, net.specs, net.classifier.spec
    if isinstance(net, ArchSpec):
        last = net.blocks[-1].out_channels if net.blocks else net.stem_channels
        return net.input_shape, net.stem_spec(), list(net.blocks), classifier(last, 10, net.classifier_hidden)
    raise TypeError(f"expected a Network or ArchSpec, got {type(net).__name__}")


def validate_plan(teacher, plan: RecastPlan) -> None:
    student_specs(teacher, plan)


def plan_arch(teacher, plan: RecastPlan) -> ArchSpec:
    """Architecture of the student ``plan`` would produce (for cost analysis)."""
    input_shape, stem, _, _ = _layout(teacher)
    specs, head = student_specs(teacher, plan)
    return ArchSpec(input_shape, specs, stem.out_channels if stem else 0, head.hidden, "student")


def student_specs(teacher, plan: RecastPlan) -> tuple[list[BlockSpec], BlockSpec]:
    """Final student block specs and classifier spec for ``plan`` applied to ``teacher``.

    Raises :class:`PlanError` naming the first offending block.
    """
    input_shape, stem, tspecs, head = _layout(teacher)
    n = len(tspecs)
    if len(plan) != n:
        raise PlanError(f"plan has {len(plan)} entries but the teacher has {n} blocks")
    specs: list[BlockSpec] = []
    prev = stem.out_channels if stem else input_shape[0]
    for i, (src, entry) in enumerate(zip(tspecs, plan.entries)):
        if entry.action == "recast":
            spec = _target_spec(i, src, entry, prev)
            # the teacher-kind next block trained in this step must land on the teacher's width
            if i + 1 < n:
                nxt = tspecs[i + 1]
                if rebuild_next_block(nxt, spec.out_channels).out_channels != nxt.out_channels:
                    raise PlanError(
                        f"block {i + 1}: a {nxt.kind} block cannot be rebuilt for {spec.out_channels} "
                        f"input channels without changing its output width"
                    )
        elif src.in_channels == prev:
            spec = src
        else:
            spec = rebuild_next_block(src, prev)
            if spec.out_channels != src.out_channels:
                raise PlanError(f"block {i}: kept {src.kind} block cannot absorb a width change of its input")
        specs.append(spec)
        prev = spec.out_channels
    head = classifier(prev, head.out_channels, head.hidden)
    try:
        validate_chain(input_shape, stem, specs, head)
    except SpecError as exc:
        raise PlanError(f"plan produces an inconsistent student: {exc}") from exc
    return specs, head


def build_student(teacher: Network, plan: RecastPlan, seed: int = 0) -> Network:
    """Student skeleton: unchanged blocks copied from the teacher, others freshly initialized."""
    specs, head = student_specs(teacher, plan)
    blocks = []
    for i, spec in enumerate(specs):
        if spec == teacher.blocks[i].spec and plan.entries[i].action == "keep":
            blocks.append(teacher.blocks[i].copy())
        else:
            blocks.append(Block(spec, seed, ("student", i), teacher.blocks[i].dtype))
    if head == teacher.classifier.spec:
        cls = teacher.classifier.copy()
    else:
        cls = Block(head, seed, ("student", "classifier"), teacher.classifier.dtype)
    stem = teacher.stem.copy() if teacher.stem else None
    student = Network(teacher.input_shape, stem, blocks, cls, (teacher.name + "-student").lstrip("-"))
    student.set_trainable(True)
    return student


def make_compression_plan(net, width_multiplier: float) -> RecastPlan:
    """Shrink every basic and convolution block to ``round(r * width)`` channels (at least 1)."""
    r = float(width_multiplier)
    if not 0 < r < 1:
        raise PlanError(f"width multiplier must lie in (0, 1), got {r}")
    entries = []
    for s in _layout(net)[2]:
        if s.kind in ("basic", "convolution"):
            entries.append(PlanEntry("recast", s.kind, max(1, math.floor(r * s.out_channels + 0.5))))
        else:
            entries.append(PlanEntry())
    if not any(e.action == "recast" for e in entries):
        raise PlanError("network has no basic or convolution blocks to compress")
    plan = RecastPlan(entries, r)
    validate_plan(net, plan)
    return plan


# ---------------------------------------------------------------------------
# configuration and records
# ---------------------------------------------------------------------------

@dataclass
class RecastConfig:
    epochs_per_block: int = 8
    lr: float = 5e-4
    lr_step: int = 5
    lr_divisor: float = 10.0
    seed: int = 0
    freeze_prefix: bool = False
    init: str = "random"  # random | teacher (copy teacher weights when the spec is unchanged)
    refresh_bn: bool = True
    finetune_epochs: int = 0
    finetune_lr: float = 1e-4
    mse_weight: float = 1.0

    def __post_init__(self):
        if self.epochs_per_block < 0 or self.finetune_epochs < 0:
            raise UsageError("epoch counts must be non-negative")
        if self.init not in ("random", "teacher"):
            raise UsageError(f"init must be 'random' or 'teacher', got {self.init!r}")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig.step_every(self.lr_step, self.lr_divisor, self.epochs_per_block, kind="adam", lr=self.lr)

    def finetune_optimizer(self) -> OptimizerConfig:
        return OptimizerConfig.step_every(self.lr_step, self.lr_divisor, self.finetune_epochs, kind="adam",
                                          lr=self.finetune_lr)


@dataclass
class StepRecord:
    step: int
    target: int
    trainable: list[str]
    initial_loss: float
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    skipped: bool = False

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else self.initial_loss

    @property
    def improved(self) -> bool:
        return self.skipped or self.final_loss < self.initial_loss

    def csv_lines(self) -> list[str]:
        out = [f"{self.step},0,{self.initial_loss:.8g},0"]
        out += [f"{self.step},{e + 1},{loss:.8g},{lr:.8g}" for e, (loss, lr) in enumerate(zip(self.losses, self.lrs))]
        return out


@dataclass
class RecastResult:
    student: Network
    steps: list[StepRecord] = field(default_factory=list)
    finetune: TrainResult | None = None

    def log_text(self) -> str:
        """``step,epoch,loss,lr`` lines (epoch 0 is the pre-training loss) and a summary record."""
        lines = ["step,epoch,loss,lr"]
        for s in self.steps:
            lines += s.csv_lines()
        finals = [s.final_loss for s in self.steps]
        lines.append(
            f"# summary steps={len(self.steps)} skipped={sum(s.skipped for s in self.steps)} "
            f"mean_final_loss={float(np.mean(finals)) if finals else 0.0:.8g} loss_normalization=per_element_batch_mean"
        )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def _teacher_pass(teacher: Network, x: np.ndarray, enter: int, leave: int | None):
    """Teacher activation entering block ``enter`` and leaving block ``leave`` (None: logits)."""
    with no_grad():
        h = teacher.prepare_input(Tensor(x))
        if teacher.stem:
            h = teacher.stem(h, False)
        h_in = h if enter == 0 else None
        for i, blk in enumerate(teacher.blocks):
            h = blk(h, False)
            if i + 1 == enter:
                h_in = h
            if leave is not None and i == leave:
                return h_in, h
        return h_in, teacher.classifier(h, False)


def _fresh(spec: BlockSpec, teacher_block: Block | None, seed: int, path: tuple, dtype, init: str) -> Block:
    if init == "teacher" and teacher_block is not None and teacher_block.spec == spec:
        blk = teacher_block.copy()
    else:
        blk = Block(spec, seed, path, dtype)
    blk.set_trainable(True)
    return blk


def recast_block_step(
    teacher: Network,
    student: Network,
    target: int,
    target_spec: BlockSpec,
    train: BatchStream,
    config: RecastConfig,
    modified: set[int] | None = None,
    step: int = 0,
) -> StepRecord:
    """Train block ``target`` (freshly built from ``target_spec``) and the block after it.

    ``student`` is updated in place: its block ``target`` and the following
    block (or the classifier when ``target`` is last) are replaced by the
    trained pair.  ``modified`` holds the indices of earlier student blocks
    that no longer equal the teacher's; they stay trainable unless
    ``config.freeze_prefix`` is set.  Every other block runs frozen in eval mode.
    """
    n = len(student.blocks)
    if not 0 <= target < n:
        raise UsageError(f"target block {target} out of range")
    modified = set(modified or ())
    dtype = student.blocks[target].dtype
    last = target == n - 1
    tgt = _fresh(target_spec, teacher.blocks[target], config.seed, ("recast", step, "target"), dtype, config.init)
    if last:
        th = teacher.classifier.spec
        nxt_spec = classifier(target_spec.out_channels, th.out_channels, th.hidden)
        nxt = _fresh(nxt_spec, teacher.classifier, config.seed, ("recast", step, "next"), dtype, config.init)
    else:
        nxt_spec = teacher.blocks[target + 1].spec
        if nxt_spec.in_channels != target_spec.out_channels:
            nxt_spec = rebuild_next_block(nxt_spec, target_spec.out_channels)
        nxt = _fresh(nxt_spec, teacher.blocks[target + 1], config.seed, ("recast", step, "next"), dtype, config.init)
    student.blocks[target] = tgt
    if last:
        student.classifier = nxt
    else:
        student.blocks[target + 1] = nxt

    prefix = sorted(j for j in modified if j < target)
    train_prefix = [] if config.freeze_prefix else prefix
    start = prefix[0] if prefix else target
    chain = [(j, student.blocks[j]) for j in range(start, target + 2) if j < n]
    if last:
        chain.append((n, student.classifier))
    trainable = set(train_prefix) | {target, target + 1}
    names = {j: (f"blocks.{j}" if j < n else "classifier") for j, _ in chain}
    params = ParamSet()
    for j, blk in chain:
        blk.set_trainable(j in trainable)
        if j in trainable:
            for pn, t in blk.params:
                params._params[f"{names[j]}.{pn}"] = t
    record = StepRecord(step, target, [names[j] for j, _ in chain if j in trainable], float("nan"))
    leave = None if last else target + 1

    def run(x: np.ndarray, training: bool):
        h_in, t_out = _teacher_pass(teacher, x, start, leave)
        h = h_in
        for j, blk in chain:
            if j in trainable:
                h = blk(h, training)
            else:
                with no_grad():
                    h = blk(h, False)
        try:
            return mse_activation_loss(h, t_out)
        except ShapeError as exc:
            raise PlanError(f"step {step} (block {target}): {exc}") from exc

    opt = config.optimizer()
    first = next(iter(train.epoch(step * 1000)), None)
    if first is None:
        raise UsageError("training stream is empty")
    with no_grad():
        # eval mode exposes the teacher-copy fixed point exactly
        if float(run(first[0], False).data) == 0.0:
            record.initial_loss = 0.0
            record.skipped = True
            log.info("step %d block %d: teacher-copy fixed point, nothing to train", step, target)
            return record
        # train-mode loss on the same batch is the baseline the epoch means compare to
        saved = [dict(blk.buffers) for _, blk in chain]
        for _, blk in chain:
            blk.buffers = {k: v.copy() for k, v in blk.buffers.items()}
        record.initial_loss = float(run(first[0], True).data)
        for (_, blk), buf in zip(chain, saved):
            blk.buffers = buf
    for epoch in range(config.epochs_per_block):
        lr = opt.lr_at(epoch)
        total, count = 0.0, 0
        for x, _ in train.epoch(step * 1000 + epoch):
            params.zero_grad()
            loss = run(x, True)
            backward(loss)
            optimizer_step(params, opt, epoch)
            total += float(loss.data) * len(x)
            count += len(x)
        record.losses.append(total / count)
        record.lrs.append(lr)
        log.info("step %d block %d epoch %d mse %.5f", step, target, epoch + 1, record.losses[-1])
    return record


# ---------------------------------------------------------------------------
# whole pipeline
# ---------------------------------------------------------------------------

def sequential_recast(
    teacher: Network,
    plan: RecastPlan,
    train: BatchStream,
    config: RecastConfig | None = None,
    on_step=None,
) -> RecastResult:
    """Recast every ``recast`` entry of ``plan`` front to back.

    The teacher is never modified.  Kept blocks are copied; a kept block right
    after a target is retrained as that step's next block.  Afterwards the BN
    statistics of every retrained block are refreshed with one clean pass over
    the training data.
    """
    config = config or RecastConfig()
    specs, _ = student_specs(teacher, plan)  # fail before any training
    student = build_student(teacher, plan, config.seed)
    result = RecastResult(student)
    modified: set[int] = set()
    n = len(teacher.blocks)
    for step, i in enumerate(plan.recast_indices):
        rec = recast_block_step(teacher, student, i, specs[i], train, config, modified, step)
        result.steps.append(rec)
        if on_step:
            on_step(rec)
        if not rec.skipped:
            modified |= {i, i + 1}
    student.validate()
    if config.refresh_bn and modified:
        prefixes = [f"blocks.{j}" if j < n else "classifier" for j in sorted(modified)]
        refresh_bn_stats(student, train, prefixes)
    student.set_trainable(True)
    return result


def kd_finetune(
    teacher: Network,
    student: Network,
    train: BatchStream,
    val: BatchStream | None,
    epochs: int,
    opt: OptimizerConfig | None = None,
    mse_weight: float = 1.0,
) -> TrainResult:
    """Whole-student distillation training; ends on the best validation state
    (the starting point included)."""
    if teacher.num_classes != student.num_classes:
        raise UsageError(f"teacher has {teacher.num_classes} classes but the student has {student.num_classes}")
    student.set_trainable(True)
    opt = opt or OptimizerConfig.step_every(5, 10.0, epochs, kind="adam", lr=1e-4)
    return train_kd(teacher, student, train, val, epochs, opt, mse_weight=mse_weight, include_initial=True)
