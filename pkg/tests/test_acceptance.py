"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 9 and 10 run the full synthetic protocol twice (3 seeds x 3
variants x 5 folds each) and take roughly half an hour apiece on one core.
Set ``DPNN_ACCEPTANCE_ROOT`` to keep their run directories.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from dpnn import data as D
from dpnn.layers import batch_norm, conv2d, global_avg_pool, max_pool2d, relu, sigmoid, softmax
from dpnn.losses import SsimConfig, cross_entropy, mean_ssim, mse_half, pretrain_loss
from dpnn.model import build_dpnn, encode_checkpoint, load_state, save_checkpoint, spatial_trace, state_dict, xavier_init
from dpnn.optim import AdamConfig, AdamState, ParamGroup, adam_step
from dpnn.protocol import ProtocolConfig, report_files, run_protocol
from dpnn.tensor import Tensor, backward, finite_diff_check, no_grad, parameter
from dpnn.tf_oracle import tucker_project
from dpnn.train import confusion, per_class_metrics

H_STEP, GRAD_TOL = 1e-3, 1e-4


# -- oracles ------------------------------------------------------------------------------


def loop_ssim(p, g, win=6, c1=1e-4, c2=9e-4):
    vals = []
    for i in range(0, p.shape[0] - win + 1, win):
        for j in range(0, p.shape[1] - win + 1, win):
            a, b = p[i : i + win, j : j + win].ravel(), g[i : i + win, j : j + win].ravel()
            n = a.size
            ma, mb = sum(a) / n, sum(b) / n
            va = sum((x - ma) ** 2 for x in a) / n
            vb = sum((x - mb) ** 2 for x in b) / n
            cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def loop_half_mse(p, g):
    total = 0.0
    for a, b in zip(p.ravel(), g.ravel()):
        total += (a - b) ** 2
    return 0.5 * total / p.size


def power_iteration_map(vox):
    d = vox.shape[0]
    flat = vox.reshape(d, -1)
    gram = flat @ flat.T
    v = np.full(d, 1.0 / np.sqrt(d))
    for _ in range(20_000):
        nxt = gram @ v
        nxt /= np.linalg.norm(nxt)
        if np.abs(nxt - v).max() < 1e-15:
            break
        v = nxt
    v = -v if v.sum() < 0 else v
    m = (v @ flat).reshape(vox.shape[1:])
    return (m - m.min()) / (m.max() - m.min())


# -- criterion 1 -------------------------------------------------------------------------------


def _grad_cases():
    rng = np.random.default_rng(0)
    x4 = lambda *s: rng.normal(size=s)
    proj = lambda *s: Tensor(rng.normal(size=s))
    cases = []

    x, w, b, p = parameter(x4(2, 2, 6, 6)), parameter(x4(3, 2, 3, 3)), parameter(x4(3)), proj(2, 3, 6, 6)
    cases.append(("conv2d", lambda _: (conv2d(x, w, b, padding=1) * p).sum(), [x, w, b]))

    x1, w1, b1, p1 = parameter(x4(2, 4, 3, 3)), parameter(x4(3, 4, 1, 1)), parameter(x4(3)), proj(2, 3, 3, 3)
    cases.append(("conv1x1", lambda _: (conv2d(x1, w1, b1) * p1).sum(), [x1, w1, b1]))

    xb, gm, bt, pb = parameter(x4(3, 2, 4, 4)), parameter([1.3, 0.7]), parameter([0.1, -0.4]), proj(3, 2, 4, 4)
    for training in (True, False):
        f = lambda _, tr=training: (batch_norm(xb, gm, bt, np.full(2, 0.1), np.full(2, 1.4), tr) * pb).sum()
        cases.append((f"batch_norm[{'train' if training else 'infer'}]", f, [xb, gm, bt]))

    xr = parameter(x4(4, 5))
    cases.append(("relu", lambda t: (relu(t) * relu(t) * 0.5).sum(), [xr]))
    xs, ps = parameter(x4(4, 5)), proj(4, 5)
    cases.append(("sigmoid", lambda t: (sigmoid(t) * ps).sum(), [xs]))
    xm = parameter(rng.permutation(72).reshape(2, 1, 6, 6) * 0.05)  # well-separated values: no pooling ties
    pm = proj(2, 1, 3, 3)
    cases.append(("max_pool2d", lambda t: (max_pool2d(t) * pm).sum(), [xm]))
    xg, pg = parameter(x4(2, 3, 4, 5)), proj(2, 3, 1, 1)
    cases.append(("global_avg_pool", lambda t: (global_avg_pool(t) * pg).sum(), [xg]))
    xsm, psm = parameter(x4(4, 3)), proj(4, 3)
    cases.append(("softmax", lambda t: (softmax(t) * psm).sum(), [xsm]))

    pm_, gm_ = parameter(rng.random((2, 1, 12, 12))), rng.random((2, 1, 12, 12))
    cases.append(("mse_half", lambda t: mse_half(t, gm_), [pm_]))
    cases.append(("mean_ssim", lambda t: mean_ssim(t, gm_), [pm_]))
    cases.append(("pretrain_loss", lambda t: pretrain_loss(t, gm_), [pm_]))
    pc = parameter(rng.dirichlet(np.ones(3), size=6))
    cases.append(("cross_entropy", lambda t: cross_entropy(t, [0, 1, 2, 2, 1, 0]), [pc]))
    return cases


def test_criterion_01_gradient_checks(acceptance_line):
    start = time.perf_counter()
    failed, worst, kinks, refined = [], 0.0, [], 0
    for name, f, params in _grad_cases():
        for t in params:
            report = finite_diff_check(f, t, h=H_STEP, tol=GRAD_TOL)
            worst = max(worst, report.max_rel_error)
            kinks += [f"{name}{k}" for k in report.kinks]
            refined += len(report.refined)
            if not report.passed:
                failed.append((name, report.failures[:3], report.max_rel_error))
    elapsed = time.perf_counter() - start
    ok = not failed and elapsed < 60
    acceptance_line(1, "gradient checks of every layer and loss", ok,
                    f"max rel err {worst:.2e} off kinks, kinks excluded {kinks}, fourth-order refined {refined}, {elapsed:.1f}s, failures {failed}")
    assert ok


# -- criteria 2 and 3 --------------------------------------------------------------------------


def test_criterion_02_ssim_suite(acceptance_line):
    rng = np.random.default_rng(2)
    cfg = SsimConfig()
    worst_self = worst_sym = worst_oracle = 0.0
    in_range = True
    for i in range(100):
        p, g = rng.random((64, 64)), rng.random((64, 64))
        if i % 2:
            g = np.clip(p + rng.normal(0, 0.1, p.shape), 0, 1)  # correlated pairs exercise high SSIM
        worst_self = max(worst_self, abs(mean_ssim(Tensor(p), p).item() - 1.0))
        s_pg, s_gp = mean_ssim(Tensor(p), g).item(), mean_ssim(Tensor(g), p).item()
        worst_sym = max(worst_sym, abs(s_pg - s_gp))
        in_range &= -1.0 <= s_pg <= 1.0
        if i < 20:
            worst_oracle = max(worst_oracle, abs(s_pg - loop_ssim(p, g)))
    anti = mean_ssim(Tensor(np.tile([0.0, 1.0], (6, 3))), np.tile([1.0, 0.0], (6, 3))).item()
    in_range &= -1.0 <= anti <= 1.0
    consts = (cfg.c1, cfg.c2) == (1e-4, 9e-4)
    ok = worst_self <= 1e-10 and worst_sym <= 1e-12 and in_range and worst_oracle <= 1e-10 and consts
    acceptance_line(2, "SSIM suite", ok,
                    f"|s(P,P)-1| {worst_self:.1e}, asym {worst_sym:.1e}, oracle {worst_oracle:.1e}, "
                    f"anti-correlated {anti:.4f}, C1/C2 {cfg.c1}/{cfg.c2}")
    assert ok


def test_criterion_03_pretraining_loss(acceptance_line):
    rng = np.random.default_rng(3)
    worst_id = worst_mse = 0.0
    for _ in range(10):
        p, g = rng.random((64, 64)), rng.random((64, 64))
        worst_id = max(worst_id, abs(pretrain_loss(Tensor(p), p).item() + 1.0))
        ref = loop_half_mse(p, g)
        worst_mse = max(worst_mse, abs(mse_half(Tensor(p), g).item() - ref) / ref)
    ok = worst_id <= 1e-10 and worst_mse <= 1e-12
    acceptance_line(3, "pretraining loss identity and 1/2N MSE factor", ok,
                    f"|L(P,P)+1| {worst_id:.1e}, MSE rel err {worst_mse:.1e}")
    assert ok


# -- criterion 4 ----------------------------------------------------------------------------------


def _one_step(theta, grad, **cfg):
    p = parameter([theta])
    p.grad = np.array([grad])
    adam_step([ParamGroup("g", [p], AdamConfig(**cfg))], AdamState())
    return p.data[0]


def test_criterion_04_adam(acceptance_line):
    errs = [
        abs(_one_step(1.0, 1.0, lr=0.1, weight_decay=0.0) - (1.0 - 0.1 / (1 + 1e-8))),
        abs(_one_step(0.0, -3.0, lr=0.01, weight_decay=0.0) - 0.01 * 3 / (3 + 1e-8)),
        abs(_one_step(1.0, 0.0, lr=1.0, weight_decay=1e-5) - (1.0 - 1e-5 / (1e-5 + 1e-8))),
    ]
    p = parameter([1.0])
    groups, state = [ParamGroup("q", [p], AdamConfig(lr=1e-2, weight_decay=0.0))], AdamState()
    for _ in range(2000):
        p.grad = None
        backward((p * p).sum())
        adam_step(groups, state)
    from dpnn.model import param_groups

    fine = param_groups(build_dpnn(48, 64, 64), "finetune")
    rates = [(g.name, g.config.lr) for g in fine]
    ok = max(errs) <= 1e-12 and abs(p.data[0]) < 1e-2 and rates == [("compression", 1e-5), ("classification", 1e-4)]
    acceptance_line(4, "Adam hand steps, quadratic convergence, fine-tuning groups", ok,
                    f"step err {max(errs):.1e}, |theta| {abs(p.data[0]):.2e}, groups {rates}")
    assert ok


# -- criterion 5 -------------------------------------------------------------------------------------


def test_criterion_05_tf_oracle(acceptance_line):
    rng = np.random.default_rng(5)
    worst_rank1 = 0.0
    for _ in range(20):
        depth, spatial = rng.random(16) + 0.05, rng.random((20, 24))
        target = (spatial - spatial.min()) / (spatial.max() - spatial.min())
        out = tucker_project(depth[:, None, None] * spatial[None]).map
        worst_rank1 = max(worst_rank1, np.abs(out - target).max())
    vox = rng.random((12, 16, 16))
    base = tucker_project(vox).map
    # powers of two rescale without rounding, so the output must match bit for bit;
    # other factors round the scaled input itself, so agreement is to a few ulps
    exact = all(np.array_equal(tucker_project(c * vox).map, base) for c in (2.0, 0.25, 2.0**10, 2.0**-30))
    ulp = max(np.abs(tucker_project(c * vox).map - base).max() for c in (3.7, 1e-3, 1e4))
    worst_pi = 0.0
    for d in range(1, 9):
        v = rng.random((d, 12, 12))
        worst_pi = max(worst_pi, np.abs(tucker_project(v).map - power_iteration_map(v)).max())
    ok = worst_rank1 <= 1e-6 and exact and ulp <= 8 * np.finfo(float).eps and worst_pi <= 1e-8
    acceptance_line(5, "tensor-factorization target oracle", ok,
                    f"rank-1 err {worst_rank1:.1e}, scale exact {exact} (non-dyadic {ulp:.1e}), "
                    f"power-iteration err {worst_pi:.1e}")
    assert ok


# -- criterion 6 ---------------------------------------------------------------------------------------


def test_criterion_06_architecture(acceptance_line, tmp_path):
    model = xavier_init(build_dpnn(48, 64, 64), 6)
    x = D.stack_volumes(D.synth_phantoms(D.PhantomConfig(), 1))
    model.train()
    proj, probs = model(Tensor(x))
    maps_ok = proj.shape == (3, 1, 64, 64) and bool(np.all((proj.data > 0) & (proj.data < 1)))
    sums_ok = bool(np.all(np.abs(probs.data.sum(axis=1) - 1.0) <= 1e-10))
    sizes = [64]
    with no_grad():
        h = proj
        for block in model.classification.blocks:
            h = block(h)
            sizes.append(h.shape[-1])
    trace_ok = sizes == spatial_trace(64) == [64, 32, 16, 8, 4, 2]
    state = state_dict(model)
    save_checkpoint(state, tmp_path / "m.ckpt")
    from dpnn.model import load_checkpoint

    fresh = build_dpnn(48, 64, 64)
    load_state(fresh, load_checkpoint(tmp_path / "m.ckpt"))
    bytes_ok = encode_checkpoint(state_dict(fresh)) == (tmp_path / "m.ckpt").read_bytes()
    ok = maps_ok and sums_ok and trace_ok and bytes_ok
    acceptance_line(6, "architecture shapes, ranges, trace, checkpoint", ok,
                    f"maps {maps_ok}, prob sums {sums_ok}, trace {sizes}, checkpoint byte-exact {bytes_ok}")
    assert ok


# -- criterion 7 -----------------------------------------------------------------------------------------


def test_criterion_07_metrics(acceptance_line):
    m = per_class_metrics(np.array([[8, 2, 0], [1, 7, 2], [0, 1, 9]]))["MSA"]
    want = {"TPR": 80.0, "TNR": 95.0, "PPV": 88.8889, "NPV": 90.4762}
    hand = all(abs(m[k] - v) <= 1e-4 for k, v in want.items())
    perfect = per_class_metrics(np.diag([5, 5, 5]))
    perfect_ok = all(v == 100.0 for cls in perfect.values() for v in cls.values())
    one_class = per_class_metrics(confusion([1] * 9, [0, 0, 0, 1, 1, 1, 2, 2, 2]))
    flagged = one_class["MSA"]["PPV"] is None and one_class["PD"]["PPV"] is None and one_class["PSP"]["NPV"] is None
    ok = hand and perfect_ok and flagged
    shown = {k: round(float(v), 4) for k, v in m.items()}
    acceptance_line(7, "TPR/TNR/PPV/NPV", ok, f"class 0 {shown}, perfect {perfect_ok}, undefined flagged {flagged}")
    assert ok


# -- criterion 8 -------------------------------------------------------------------------------------------


def test_criterion_08_stratification(acceptance_line):
    labels = [2] * 136 + [0] * 91 + [1] * 30
    split = D.stratified_kfold(labels, 5, 0)
    counts = [tuple(sum(labels[i] == c for i in f) for c in (2, 0, 1)) for f in split.folds]
    counts_ok = all(pd in (27, 28) and msa in (18, 19) and psp == 6 for pd, msa, psp in counts)
    rng = np.random.default_rng(8)
    partition_ok = True
    for _ in range(200):
        sizes = rng.integers(5, 60, size=3)
        lab = rng.permutation(np.repeat([0, 1, 2], sizes)).tolist()
        k = int(rng.integers(2, 6))
        folds = D.stratified_kfold(lab, k, int(rng.integers(2**31))).folds
        flat = [i for f in folds for i in f]
        partition_ok &= len(flat) == len(set(flat)) and sorted(flat) == list(range(len(lab)))
    ok = counts_ok and partition_ok
    acceptance_line(8, "stratified 5-fold split", ok, f"per-fold PD/MSA/PSP {counts}, 200 manifests partitioned {partition_ok}")
    assert ok


# -- criteria 9 and 10 -------------------------------------------------------------------------------------


PROTOCOL = ProtocolConfig()


@pytest.fixture(scope="module")
def protocol_root(tmp_path_factory):
    keep = os.environ.get("DPNN_ACCEPTANCE_ROOT")
    return Path(keep) if keep else tmp_path_factory.mktemp("protocol")


@pytest.fixture(scope="module")
def first_run(protocol_root):
    start = time.perf_counter()
    means = run_protocol(protocol_root / "run1", PROTOCOL)
    return means, time.perf_counter() - start


def test_criterion_09_synthetic_end_to_end(acceptance_line, first_run):
    means, elapsed = first_run
    full, bl1, bl2 = means["full"], means["bl1"], means["bl2"]
    ok = full >= 0.90 and full >= bl1 >= bl2 and elapsed < 3600
    acceptance_line(9, "synthetic end-to-end (150 volumes, 5-fold, 3 seeds)", ok,
                    f"mean accuracy full {full:.4f}, BL-1 {bl1:.4f}, BL-2 {bl2:.4f}, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_10_reproducible_reports(acceptance_line, first_run, protocol_root):
    run2 = protocol_root / "run2"
    proc = subprocess.run([sys.executable, "-m", "dpnn.protocol", "--root", str(run2)], capture_output=True, text=True)
    first, second = report_files(protocol_root / "run1"), report_files(run2)
    names = lambda files, root: [str(f.relative_to(root)) for f in files]
    same_set = names(first, protocol_root / "run1") == names(second, run2)
    identical = same_set and all(a.read_bytes() == b.read_bytes() for a, b in zip(first, second))
    ok = proc.returncode == 0 and identical
    acceptance_line(10, "identical seeds give byte-identical metric reports", ok,
                    f"{len(first)} report files compared, exit {proc.returncode}")
    assert ok, proc.stderr[-2000:]
