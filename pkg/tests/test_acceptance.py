"""Acceptance criteria 1-8.

Each test prints ``criterion N: PASS|FAIL  <measurements>`` (also echoed in
the pytest terminal summary) and then asserts the same condition.  The
desk-scale experiments (4-7) are marked ``slow``; deselect them with
``-m "not slow"``.  Epoch budgets are sized for a single CPU core.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from conftest import gradcheck, t64
from test_tensor_ops import OPS, _case

from netrecast.blocks import Block, basic, bottleneck, convolution, dense, transition
from netrecast.cli import main
from netrecast.costmodel import cost_report, parse_kv
from netrecast.data import BatchStream, synth_splits
from netrecast.network import build_network
from netrecast.recast import (
    PlanEntry,
    RecastConfig,
    RecastPlan,
    kd_finetune,
    make_compression_plan,
    plan_arch,
    sequential_recast,
)
from netrecast.training import evaluate, teacher_optimizer, train_backprop, train_kd

# shared desk-scale protocol
TEACHER_EPOCHS = 4  # teacher recipe; the scratch and KD-only baselines reuse it
EPOCHS_PER_BLOCK = 2
FINETUNE_EPOCHS = 4


@pytest.fixture(scope="module")
def desk():
    tr, va = synth_splits(0, 10_000, 2_000, num_classes=4, size=16)
    return BatchStream(tr, 128, seed=0, augment=True), BatchStream(va, 256, shuffle=False)


def _teacher(name, desk, seed=0):
    trs, vas = desk
    net = build_network(name, trs.dataset.num_classes, seed)
    train_backprop(net, trs, vas, TEACHER_EPOCHS, teacher_optimizer(epochs=TEACHER_EPOCHS))
    return net, evaluate(net, vas)


def _recast_and_finetune(teacher, plan, desk):
    trs, vas = desk
    res = sequential_recast(teacher, plan, trs, RecastConfig(epochs_per_block=EPOCHS_PER_BLOCK))
    recast_acc = evaluate(res.student, vas)
    kd_finetune(teacher, res.student, trs, vas, FINETUNE_EPOCHS)
    return res, recast_acc, evaluate(res.student, vas)


def _scratch(arch, desk, teacher=None, seed=1):
    """Same student architecture trained from random init on the teacher recipe (KD objective if ``teacher``)."""
    trs, vas = desk
    net = build_network(arch, trs.dataset.num_classes, seed)
    opt = teacher_optimizer(epochs=TEACHER_EPOCHS)
    if teacher is None:
        train_backprop(net, trs, vas, TEACHER_EPOCHS, opt)
    else:
        train_kd(teacher, net, trs, vas, TEACHER_EPOCHS, opt)
    return evaluate(net, vas)


# ---------------------------------------------------------------------------
# 1. cost model
# ---------------------------------------------------------------------------

def test_criterion_1_cost_model(tmp_path, capsys, acceptance):
    got = {}
    for name in ("resnet56", "wrn-28-10"):
        assert main(["analyze", "--arch", name, "--out", str(tmp_path / name)]) == 0
        got[name] = {k: int(v) for k, v in parse_kv((tmp_path / name / "cost.kv").read_text()).items()
                     if k in ("params", "mults", "act_load_per_image")}
    capsys.readouterr()
    r, w = got["resnet56"], got["wrn-28-10"]
    checks = [
        abs(r["params"] / 0.85e6 - 1) <= 0.02,
        abs(r["mults"] / 125.75e6 - 1) <= 0.02,
        abs(r["act_load_per_image"] / 0.56e6 - 1) <= 0.15,
        abs(w["params"] / 36.45e6 - 1) <= 0.02,
        abs(w["mults"] / 5.24e9 - 1) <= 0.02,
    ]
    detail = (f"resnet56 params={r['params']} mults={r['mults']} acts={r['act_load_per_image']}; "
              f"wrn-28-10 params={w['params']} mults={w['mults']}")
    assert acceptance(1, all(checks), detail), detail


# ---------------------------------------------------------------------------
# 2. gradients
# ---------------------------------------------------------------------------

_KINDS = [
    lambda c: convolution(c, 3, 1),
    lambda c: convolution(c, 2, 2, pool="max"),
    lambda c: basic(c, 3),
    lambda c: basic(c, 2, 2),
    lambda c: bottleneck(c, 4, 1, mid=2),
    lambda c: dense(c, 2, 2, bottleneck_width=2),
    lambda c: transition(c, 2),
]


def test_criterion_2_gradients(acceptance):
    cases = 0
    failures = []
    for name in OPS:
        for seed in range(6):
            rng = np.random.default_rng(1000 * OPS.index(name) + seed)
            build, inputs = _case(name, rng)
            try:
                gradcheck(build, inputs, rng)
            except AssertionError:
                failures.append(f"{name}/{seed}")
            cases += 1
    for seed in range(3):
        rng = np.random.default_rng(500 + seed)
        c, blocks = 3, []
        for j, idx in enumerate(rng.choice(len(_KINDS), size=3, replace=False)):
            spec = _KINDS[idx](c)
            blocks.append(Block(spec, seed, ("compose", j), dtype=np.float64))
            c = spec.out_channels
        x = t64(rng, 2, 3, 8, 8)
        tensors = [x] + [t for b in blocks for _, t in b.params]

        def build(x, *ps, blocks=blocks):
            for b in blocks:
                x = b(x, True)
            return x

        try:
            gradcheck(build, tensors, rng)
        except AssertionError:
            failures.append(f"composed/{seed}:" + "+".join(b.spec.kind for b in blocks))
        cases += 1
    detail = f"{cases} finite-difference cases (float64, rtol 1e-3), failures={failures or 'none'}"
    assert acceptance(2, cases >= 100 and not failures, detail), detail


# ---------------------------------------------------------------------------
# 3. identity fixed point
# ---------------------------------------------------------------------------

def test_criterion_3_identity(acceptance):
    tr, va = synth_splits(5, 256, 64, size=16)
    trs, vas = BatchStream(tr, 64, seed=0, augment=True), BatchStream(va, 64, shuffle=False)
    teacher = build_network("mini-resnet", 4, 0)
    train_backprop(teacher, trs, None, 1)
    x = next(vas.epoch(0))[0]
    ident = sequential_recast(teacher, RecastPlan.keep_all(6), trs)
    same_logits = np.array_equal(teacher(x).numpy(), ident.student(x).numpy())
    copy_plan = RecastPlan([PlanEntry("recast", "basic")] * 6)
    res = sequential_recast(teacher, copy_plan, trs, RecastConfig(epochs_per_block=1, init="teacher"))
    losses = [s.initial_loss for s in res.steps]
    ok = same_logits and losses == [0.0] * 6 and all(s.skipped for s in res.steps)
    detail = f"all-keep logits bit-identical={same_logits}; teacher-copied step losses={losses}"
    assert acceptance(3, ok, detail), detail


# ---------------------------------------------------------------------------
# 4. mini-ResNet -> all-conv
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def resnet_run(desk):
    t0 = time.perf_counter()
    teacher, t_acc = _teacher("mini-resnet", desk)
    plan = RecastPlan.all_to(teacher, "convolution")
    res, recast_acc, student_acc = _recast_and_finetune(teacher, plan, desk)
    arch = plan_arch(teacher, plan)
    scratch_acc = _scratch(arch, desk)
    kd_acc = _scratch(arch, desk, teacher)
    return {
        "teacher": t_acc, "recast": recast_acc, "student": student_acc, "scratch": scratch_acc, "kd": kd_acc,
        "steps": res.steps, "acts": (cost_report(teacher).act_load_per_image, cost_report(arch).act_load_per_image),
        "seconds": time.perf_counter() - t0,
    }


@pytest.mark.slow
def test_criterion_4_resnet_to_conv(resnet_run, acceptance):
    r = resnet_run
    checks = {
        "teacher>=95%": r["teacher"] >= 0.95,
        "student>=teacher-2pp": r["student"] >= r["teacher"] - 0.02,
        "scratch<=student+0.5pp": r["scratch"] <= r["student"] + 0.005,
        "kd_only<=student+0.5pp": r["kd"] <= r["student"] + 0.005,
        "<=30min": r["seconds"] <= 1800,
    }
    detail = (f"teacher={r['teacher']:.4f} recast={r['recast']:.4f} recast+kd={r['student']:.4f} "
              f"scratch={r['scratch']:.4f} kd_only={r['kd']:.4f} act_load {r['acts'][0]}->{r['acts'][1]} "
              f"time={r['seconds']:.0f}s failed={[k for k, v in checks.items() if not v] or 'none'}")
    assert acceptance(4, all(checks.values()), detail), detail


@pytest.mark.slow
def test_desk_block_losses_decrease(resnet_run):
    for step in resnet_run["steps"]:
        curve = [step.initial_loss] + step.losses
        assert step.final_loss < step.initial_loss
        assert all(b <= 1.05 * a for a, b in zip(curve, curve[1:])), (step.target, curve)


# ---------------------------------------------------------------------------
# 5. mini-DenseNet -> basic
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_dense_to_basic(desk, acceptance):
    t0 = time.perf_counter()
    teacher, t_acc = _teacher("mini-densenet", desk)
    plan = RecastPlan.all_to(teacher, "basic")
    _, recast_acc, s_acc = _recast_and_finetune(teacher, plan, desk)
    before, after = cost_report(teacher).act_load_per_image, cost_report(plan_arch(teacher, plan)).act_load_per_image
    secs = time.perf_counter() - t0
    ratio = before / after
    ok = s_acc >= t_acc - 0.02 and ratio >= 2.0 and secs <= 1800
    detail = (f"teacher={t_acc:.4f} recast={recast_acc:.4f} recast+kd={s_acc:.4f} "
              f"act_load {before}->{after} ({ratio:.2f}x) time={secs:.0f}s")
    assert acceptance(5, ok, detail), detail


# ---------------------------------------------------------------------------
# 6. compression
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_compression(desk, acceptance):
    t0 = time.perf_counter()
    teacher, t_acc = _teacher("mini-convnet", desk)
    plan = make_compression_plan(teacher, 0.5)
    _, recast_acc, s_acc = _recast_and_finetune(teacher, plan, desk)
    p_ratio = cost_report(teacher).params / cost_report(plan_arch(teacher, plan)).params
    wrn = build_network("wrn-28-10", 10)
    w_ratio = cost_report(wrn).params / cost_report(plan_arch(wrn, make_compression_plan(wrn, 0.2))).params
    secs = time.perf_counter() - t0
    ok = s_acc >= t_acc - 0.03 and abs(p_ratio / 4 - 1) <= 0.15 and abs(w_ratio / 24.9 - 1) <= 0.10
    detail = (f"teacher={t_acc:.4f} compressed={recast_acc:.4f} compressed+kd={s_acc:.4f} "
              f"params ratio={p_ratio:.2f}x (target 4x+-15%) wrn-28-10 r=0.2 ratio={w_ratio:.2f}x "
              f"(target 24.9x+-10%) time={secs:.0f}s")
    assert acceptance(6, ok, detail), detail


# ---------------------------------------------------------------------------
# 7. sequential recasting vs training the deep plain student from scratch
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_sequential_vs_scratch(desk, acceptance):
    t0 = time.perf_counter()
    teacher, t_acc = _teacher("deep-resnet", desk)
    plan = RecastPlan.all_to(teacher, "convolution")
    arch = plan_arch(teacher, plan)
    n_conv = sum(s.kind == "convolution" for s in arch.blocks)
    _, recast_acc, s_acc = _recast_and_finetune(teacher, plan, desk)
    scratch_acc = _scratch(arch, desk)
    secs = time.perf_counter() - t0
    seq_err, scratch_err = 1 - s_acc, 1 - scratch_acc
    ok = n_conv >= 10 and seq_err < scratch_err + 0.005
    detail = (f"{n_conv} conv blocks; teacher={t_acc:.4f} sequential err={seq_err:.4f} "
              f"(before kd {1 - recast_acc:.4f}) scratch err={scratch_err:.4f} time={secs:.0f}s")
    assert acceptance(7, ok, detail), detail


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path, capsys, acceptance):
    data = ["--n-train", "512", "--n-val", "128", "--batch-size", "64", "--seed", "3", "--data-seed", "4"]
    for rep in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / rep / "t"), "--arch", "mini-resnet", "--epochs", "2", *data]) == 0
        assert main(["recast", "--out", str(tmp_path / rep / "r"), "--teacher", str(tmp_path / rep / "t" / "teacher.ckpt"),
                     "--to", "conv", "--epochs-per-block", "1", "--finetune-epochs", "1", *data]) == 0
    capsys.readouterr()
    files = ["t/teacher.ckpt", "t/metrics.csv", "r/student.ckpt", "r/recast_log.csv", "r/metrics.csv", "r/summary.kv"]
    differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    detail = f"{len(files)} artifacts compared across two seeded runs, differing={differ or 'none'}"
    assert acceptance(8, not differ, detail), detail
