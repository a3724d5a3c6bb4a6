"""Command-line entry point: ``netrecast <command> [options]``.

Every option can also come from an INI file (``--config``): a ``[common]``
section applies to all commands, a section named after the command overrides
it, and flags given on the command line override both.  Each run writes its
resolved settings to ``config.ini`` in the output directory.

Exit status: 0 success, 2 configuration or validation error (nothing has been
computed yet), 3 failure during training or evaluation.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import costmodel
from .checkpoint import checkpoint_extra, load_checkpoint, save_checkpoint
from .data import BatchStream, Dataset, compute_stats, load_dataset, split_dataset, synth_splits
from .errors import ConfigError, RecastError
from .network import Network, build_network, parse_arch
from .optim import OptimizerConfig
from .recast import (
    RecastConfig,
    RecastPlan,
    format_plan,
    kd_finetune,
    make_compression_plan,
    parse_plan,
    sequential_recast,
    validate_plan,
)
from .training import evaluate, teacher_optimizer, train_backprop

OUT_ENV = "NETRECAST_OUT"
COMMANDS = ("train", "recast", "finetune", "analyze", "eval", "export-plotdata")

# key -> (type, default, help); None default means "required or derived"
DATA_KEYS = {
    "data": (str, "synth", "'synth' or a dataset file"),
    "format": (str, "", "idx | cifar-binary | raw-tensor (inferred from the file name if empty)"),
    "val_data": (str, "", "separate validation file; otherwise n_val images are split off"),
    "n_train": (int, 10000, "synthetic training images"),
    "n_val": (int, 2000, "validation images (synthetic count or split size)"),
    "num_classes": (int, 0, "class count (0: synthetic default 4 / format default)"),
    "size": (int, 16, "synthetic image side"),
    "noise": (float, 0.2, "synthetic pixel noise"),
    "data_seed": (int, 0, "seed for synthetic data and the validation split"),
    "batch_size": (int, 128, "minibatch size"),
    "seed": (int, 0, "seed for initialization and batch order"),
}
KEYS: dict[str, dict] = {
    "train": {
        **DATA_KEYS,
        "arch": (str, "mini-resnet", "preset name or architecture file"),
        "epochs": (int, 10, "training epochs"),
        "lr": (float, 0.1, "initial SGD-Nesterov learning rate"),
        "weight_decay": (float, 5e-4, "L2 weight decay"),
    },
    "recast": {
        **DATA_KEYS,
        "teacher": (str, "", "teacher checkpoint"),
        "plan": (str, "", "plan file"),
        "to": (str, "", "recast every eligible block to this kind (instead of a plan file)"),
        "compress": (float, 0.0, "width multiplier for a compression plan (instead of a plan file)"),
        "epochs_per_block": (int, 8, "epochs per recasting step"),
        "lr": (float, 5e-4, "Adam learning rate for block training"),
        "lr_step": (int, 5, "divide the learning rate by 10 every this many epochs"),
        "freeze_prefix": (bool, False, "freeze earlier recast blocks (ablation)"),
        "init": (str, "random", "random | teacher (copy teacher weights for unchanged specs)"),
        "finetune_epochs": (int, 0, "distillation fine-tuning epochs after recasting"),
        "finetune_lr": (float, 1e-4, "Adam learning rate for fine-tuning"),
        "mse_weight": (float, 1.0, "weight of the teacher-logit term while fine-tuning"),
    },
    "finetune": {
        **DATA_KEYS,
        "teacher": (str, "", "teacher checkpoint"),
        "student": (str, "", "student checkpoint"),
        "epochs": (int, 10, "fine-tuning epochs"),
        "lr": (float, 1e-4, "Adam learning rate"),
        "mse_weight": (float, 1.0, "weight of the teacher-logit term (0: cross-entropy only)"),
    },
    "analyze": {
        "arch": (str, "", "preset name or architecture file"),
        "checkpoint": (str, "", "checkpoint to analyze instead of --arch"),
        "input_shape": (str, "", "C,H,W (default: the architecture's own)"),
    },
    "eval": {
        **DATA_KEYS,
        "checkpoint": (str, "", "network checkpoint"),
        "split": (str, "val", "val | train"),
    },
    "export-plotdata": {
        "runs": (str, "", "comma-separated recast output directories"),
    },
}
REQUIRED = {"recast": ("teacher",), "finetune": ("teacher", "student"), "eval": ("checkpoint",),
            "export-plotdata": ("runs",)}


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netrecast", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="INI file with [common] and [%s] sections" % cmd)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{cmd} or runs/{cmd})")
        for key, (typ, default, text) in KEYS[cmd].items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, dest=key, nargs="?", const="true", default=None, help=text)
            else:
                sp.add_argument(flag, dest=key, default=None, help=f"{text} [{default}]")
    return p


def resolve_config(cmd: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then command-line flags; values typed and checked."""
    spec = KEYS[cmd]
    raw = {k: d for k, (_, d, _) in spec.items()}
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise ConfigError(f"cannot read config file {args.config}")
        for section in ("common", cmd):
            if not cp.has_section(section):
                continue
            for k, v in cp.items(section):
                key = k.replace("-", "_")
                if key not in spec:
                    if section == "common":
                        continue  # common keys only apply where meaningful
                    raise ConfigError(f"[{section}] has unknown key {k!r}")
                raw[key] = v
    for key in spec:
        v = getattr(args, key, None)
        if v is not None:
            raw[key] = v
    cfg = {}
    for key, (typ, _, _) in spec.items():
        try:
            cfg[key] = _bool(raw[key]) if typ is bool else typ(raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    for key in REQUIRED.get(cmd, ()):
        if not cfg[key]:
            raise ConfigError(f"{cmd} needs --{key.replace('_', '-')}")
    for key in ("epochs", "epochs_per_block", "finetune_epochs", "n_val"):
        if key in cfg and cfg[key] < 0:
            raise ConfigError(f"{key} must be non-negative")
    if "batch_size" in cfg and cfg["batch_size"] < 1:
        raise ConfigError("batch_size must be positive")
    return cfg


def write_config(cmd: str, cfg: dict, out: Path) -> None:
    cp = configparser.ConfigParser()
    cp[cmd] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in sorted(cfg.items())}
    with open(out / "config.ini", "w") as fh:
        cp.write(fh)


def output_dir(cmd: str, args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / cmd


# ---------------------------------------------------------------------------
# shared loading helpers (all run before any compute)
# ---------------------------------------------------------------------------

def _infer_format(path: str) -> str:
    name = Path(path).name.lower()
    if "ubyte" in name or name.endswith(".idx"):
        return "idx"
    if name.endswith(".bin"):
        return "cifar-binary"
    if name.endswith((".nrt", ".raw", ".ckpt")):
        return "raw-tensor"
    raise ConfigError(f"cannot infer the format of {path}; pass --format")


def _load_file(path: str, fmt: str, num_classes: int, split: str) -> Dataset:
    fmt = fmt or _infer_format(path)
    kw: dict = {"split": split}
    if fmt in ("idx", "cifar-binary") and num_classes:
        kw["num_classes"] = num_classes
    return load_dataset(path, fmt, **kw)


def load_data(cfg: dict) -> tuple[Dataset, Dataset]:
    if cfg["data"] == "synth":
        k = cfg["num_classes"] or 4
        if cfg["n_train"] < k or cfg["n_val"] < k:
            raise ConfigError(f"synthetic splits need at least {k} images each")
        return synth_splits(cfg["data_seed"], cfg["n_train"], cfg["n_val"], num_classes=k,
                            size=cfg["size"], noise=cfg["noise"])
    ds = _load_file(cfg["data"], cfg["format"], cfg["num_classes"], "train")
    if cfg["val_data"]:
        tr = compute_stats(ds)
        va = _load_file(cfg["val_data"], cfg["format"], cfg["num_classes"], "val").with_stats_from(tr)
        if va.shape != tr.shape:
            raise ConfigError(f"validation images {va.shape} differ from training images {tr.shape}")
        return tr, va
    if not 0 < cfg["n_val"] < len(ds):
        raise ConfigError(f"n_val must lie in (0, {len(ds)}) to split {cfg['data']}")
    return split_dataset(ds, cfg["n_val"], cfg["data_seed"])


def _stats_extra(ds: Dataset) -> dict:
    return {"mean": [float(v) for v in ds.mean], "std": [float(v) for v in ds.std]}


def _apply_stats(path: str, *datasets: Dataset) -> list[Dataset]:
    """Use the normalization a network was trained with, when its checkpoint records it."""
    extra = checkpoint_extra(path)
    if "mean" not in extra:
        return list(datasets)
    mean = np.asarray(extra["mean"], dtype=np.float32)
    std = np.asarray(extra["std"], dtype=np.float32)
    out = []
    for ds in datasets:
        if len(mean) != ds.shape[0]:
            raise ConfigError(f"{path} was trained on {len(mean)}-channel data, dataset has {ds.shape[0]}")
        ds = Dataset(ds.images, ds.labels, ds.num_classes, ds.split, mean, std)
        out.append(ds)
    return out


def _check_fit(net: Network, ds: Dataset, what: str) -> None:
    if tuple(net.input_shape) != tuple(ds.shape):
        raise ConfigError(f"{what} expects inputs {net.input_shape}, dataset has {ds.shape}")
    if net.num_classes != ds.num_classes:
        raise ConfigError(f"{what} has {net.num_classes} classes, dataset has {ds.num_classes}")


def _resolve_arch(text: str):
    if Path(text).is_file():
        return parse_arch(Path(text).read_text(), Path(text).stem)
    return text


def _write_cost(out: Path, stem: str, report, title: str, baseline=None) -> None:
    (out / f"{stem}.txt").write_text(costmodel.format_text(report, title, baseline))
    (out / f"{stem}.kv").write_text(costmodel.format_kv(report))


def _write_kv(path: Path, values: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


def _read_kv(path: Path) -> dict:
    return costmodel.parse_kv(path.read_text())


def _metric_rows(text: str) -> list[dict]:
    return [r for r in csv.DictReader(text.splitlines()) if r["val_acc"] != "nan"]


# ---------------------------------------------------------------------------
# commands: each returns a zero-argument callable that does the compute
# ---------------------------------------------------------------------------

def prepare_train(cfg: dict, out: Path):
    tr, va = load_data(cfg)
    net = build_network(_resolve_arch(cfg["arch"]), tr.num_classes, cfg["seed"], input_shape=tr.shape)
    opt = teacher_optimizer(cfg["lr"], cfg["epochs"], cfg["weight_decay"])

    def run():
        from .plotting import plot_metrics

        trs = BatchStream(tr, cfg["batch_size"], cfg["seed"], augment=True)
        vas = BatchStream(va, 256)
        result = train_backprop(net, trs, vas, cfg["epochs"], opt)
        save_checkpoint(net, out / "teacher.ckpt", _stats_extra(tr))
        (out / "metrics.csv").write_text(result.metrics_csv())
        _write_cost(out, "cost", costmodel.cost_report(net), f"cost of {net.name or 'network'}")
        if result.history:
            plot_metrics(_metric_rows(result.metrics_csv()), out / "metrics.png", "teacher training")
        print(f"best_epoch={result.best_epoch} val_acc={result.best_val_acc:.4f} checkpoint={out / 'teacher.ckpt'}")

    return run


def _plan_for(cfg: dict, teacher: Network) -> RecastPlan:
    chosen = [k for k in ("plan", "to", "compress") if cfg[k]]
    if len(chosen) != 1:
        raise ConfigError("recast needs exactly one of --plan, --to, --compress")
    if cfg["plan"]:
        plan = parse_plan(Path(cfg["plan"]).read_text())
    elif cfg["to"]:
        kind = {"conv": "convolution"}.get(cfg["to"], cfg["to"])
        plan = RecastPlan.all_to(teacher, kind)
    else:
        plan = make_compression_plan(teacher, cfg["compress"])
    validate_plan(teacher, plan)
    return plan


def prepare_recast(cfg: dict, out: Path):
    teacher = load_checkpoint(cfg["teacher"])
    plan = _plan_for(cfg, teacher)
    tr, va = _apply_stats(cfg["teacher"], *load_data(cfg))
    _check_fit(teacher, tr, "teacher")
    rc = RecastConfig(
        epochs_per_block=cfg["epochs_per_block"], lr=cfg["lr"], lr_step=cfg["lr_step"], seed=cfg["seed"],
        freeze_prefix=cfg["freeze_prefix"], init=cfg["init"], finetune_epochs=cfg["finetune_epochs"],
        finetune_lr=cfg["finetune_lr"], mse_weight=cfg["mse_weight"],
    )

    def run():
        from .plotting import plot_block_costs

        trs = BatchStream(tr, cfg["batch_size"], cfg["seed"], augment=True)
        vas = BatchStream(va, 256)
        result = sequential_recast(teacher, plan, trs, rc)
        student = result.student
        summary = {"teacher_val_acc": f"{evaluate(teacher, vas):.6f}",
                   "recast_val_acc": f"{evaluate(student, vas):.6f}"}
        if rc.finetune_epochs:
            ft = kd_finetune(teacher, student, trs, vas, rc.finetune_epochs, rc.finetune_optimizer(), rc.mse_weight)
            (out / "metrics.csv").write_text(ft.metrics_csv())
        summary["student_val_acc"] = f"{evaluate(student, vas):.6f}"
        save_checkpoint(student, out / "student.ckpt", _stats_extra(tr))
        (out / "recast_log.csv").write_text(result.log_text())
        (out / "plan.txt").write_text(format_plan(plan))
        before, after = costmodel.cost_report(teacher), costmodel.cost_report(student)
        _write_cost(out, "cost_before", before, "teacher")
        _write_cost(out, "cost_after", after, "student", before)
        for key, rep in (("before", before), ("after", after)):
            for k, v in rep.totals().items():
                summary[f"{key}_{k}"] = v
        _write_kv(out / "summary.kv", summary)
        plot_block_costs(after, out / "cost_blocks.png", before, "per-block cost")
        print(" ".join(f"{k}={v}" for k, v in summary.items() if "acc" in k))

    return run


def prepare_finetune(cfg: dict, out: Path):
    teacher = load_checkpoint(cfg["teacher"])
    student = load_checkpoint(cfg["student"])
    if teacher.num_classes != student.num_classes:
        raise ConfigError(f"teacher has {teacher.num_classes} classes, student {student.num_classes}")
    tr, va = _apply_stats(cfg["teacher"], *load_data(cfg))
    _check_fit(teacher, tr, "teacher")
    _check_fit(student, tr, "student")
    opt = OptimizerConfig.step_every(5, 10.0, cfg["epochs"], kind="adam", lr=cfg["lr"])

    def run():
        trs = BatchStream(tr, cfg["batch_size"], cfg["seed"], augment=True)
        vas = BatchStream(va, 256)
        result = kd_finetune(teacher, student, trs, vas, cfg["epochs"], opt, cfg["mse_weight"])
        save_checkpoint(student, out / "student.ckpt", _stats_extra(tr))
        (out / "metrics.csv").write_text(result.metrics_csv())
        _write_kv(out / "summary.kv", {"student_val_acc": f"{result.best_val_acc:.6f}",
                                       "best_epoch": result.best_epoch})
        print(f"best_epoch={result.best_epoch} val_acc={result.best_val_acc:.4f}")

    return run


def prepare_analyze(cfg: dict, out: Path):
    if bool(cfg["arch"]) == bool(cfg["checkpoint"]):
        raise ConfigError("analyze needs exactly one of --arch, --checkpoint")
    if cfg["checkpoint"]:
        target = load_checkpoint(cfg["checkpoint"])
        name = Path(cfg["checkpoint"]).stem
    else:
        from .presets import get_preset

        arch = _resolve_arch(cfg["arch"])
        target = get_preset(arch) if isinstance(arch, str) else arch
        name = cfg["arch"]
    shape = None
    if cfg["input_shape"]:
        try:
            shape = tuple(int(v) for v in cfg["input_shape"].split(","))
        except ValueError as exc:
            raise ConfigError(f"input_shape must be C,H,W: {exc}") from exc
        if len(shape) != 3 or min(shape) < 1:
            raise ConfigError("input_shape must be three positive integers C,H,W")
    report = costmodel.cost_report(target, shape)

    def run():
        from .plotting import plot_block_costs

        text = costmodel.format_text(report, f"cost of {name}")
        (out / "cost.txt").write_text(text)
        (out / "cost.kv").write_text(costmodel.format_kv(report))
        plot_block_costs(report, out / "cost_blocks.png", title=name)
        sys.stdout.write(text)

    return run


def prepare_eval(cfg: dict, out: Path):
    if cfg["split"] not in ("val", "train"):
        raise ConfigError("split must be val or train")
    net = load_checkpoint(cfg["checkpoint"])
    tr, va = _apply_stats(cfg["checkpoint"], *load_data(cfg))
    ds = va if cfg["split"] == "val" else tr
    _check_fit(net, ds, "network")

    def run():
        acc = evaluate(net, BatchStream(ds, 256))
        _write_kv(out / "eval.kv", {"checkpoint": cfg["checkpoint"], "split": cfg["split"], "images": len(ds),
                                    "accuracy": f"{acc:.6f}", "error": f"{1 - acc:.6f}"})
        print(f"accuracy={acc:.6f} images={len(ds)}")

    return run


PLOT_COLUMNS = ("run", "stage", "val_error", "params", "mults", "act_load")


def prepare_export(cfg: dict, out: Path):
    rows = []
    for d in [s.strip() for s in cfg["runs"].split(",") if s.strip()]:
        path = Path(d) / "summary.kv"
        if not path.is_file():
            raise ConfigError(f"{d} has no summary.kv (is it a recast output directory?)")
        kv = _read_kv(path)
        run_name = Path(d).resolve().name
        try:
            for stage, acc_key, pre in (("baseline", "teacher_val_acc", "before"),
                                        ("recast", "student_val_acc", "after")):
                rows.append({
                    "run": run_name,
                    "stage": stage,
                    "val_error": f"{1 - float(kv[acc_key]):.6f}",
                    "params": kv[f"{pre}_params"],
                    "mults": kv[f"{pre}_mults"],
                    "act_load": kv[f"{pre}_act_load_per_image"],
                })
        except KeyError as exc:
            raise ConfigError(f"{path} lacks {exc}") from exc

    def run():
        from .plotting import plot_error_vs_cost

        lines = ["\t".join(PLOT_COLUMNS)] + ["\t".join(str(r[c]) for c in PLOT_COLUMNS) for r in rows]
        (out / "plotdata.tsv").write_text("\n".join(lines) + "\n")
        plot_error_vs_cost(rows, "mults", out / "error_vs_mults.png", "multiplications per image")
        plot_error_vs_cost(rows, "act_load", out / "error_vs_actload.png", "activation load per image")
        sys.stdout.write("\n".join(lines) + "\n")

    return run


PREPARE = {
    "train": prepare_train,
    "recast": prepare_recast,
    "finetune": prepare_finetune,
    "analyze": prepare_analyze,
    "eval": prepare_eval,
    "export-plotdata": prepare_export,
}


def _fail(cmd: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"netrecast {cmd}: error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    cmd = args.command
    try:
        cfg = resolve_config(cmd, args)
        out = output_dir(cmd, args)
        job = PREPARE[cmd](cfg, out)
        out.mkdir(parents=True, exist_ok=True)
        write_config(cmd, cfg, out)
    except (RecastError, OSError, ValueError, KeyError) as exc:
        return _fail(cmd, exc, 2)
    try:
        job()
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        return _fail(cmd, exc, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
