"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import csv
import json
import time

import numpy as np
import pytest

from stcnet import functional as F
from stcnet import gradsuite, oracle
from stcnet.arch import REFERENCE_OUTPUT_SIZES, build, param_count, preset, shape_check
from stcnet.checkpoint import Checkpoint, load_checkpoint, model_tensors, restore_model, save_checkpoint
from stcnet.cli import main
from stcnet.data import SynthSpec, generate
from stcnet.runtime import thread_limit
from stcnet.stc import STCBlockParams, scb_forward, stc_forward, tcb_forward
from stcnet.tensor import Tensor, no_grad
from stcnet.train import CSV_FIELDS, OptimConfig, Trainer, run_experiment


@pytest.fixture
def report(capsys):
    def emit(criterion: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nacceptance criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return emit


# 1 -------------------------------------------------------------------------

def _conv_case(rng):
    g = int(rng.choice([1, 2, 4]))
    cin, cout = g * int(rng.integers(1, 3)), g * int(rng.integers(1, 3))
    ext = rng.integers(1, 9, 3)
    k = np.minimum(rng.integers(1, 4, 3), ext + 0)
    pad = np.minimum(rng.integers(0, 2, 3), k // 2)
    stride = rng.integers(1, 3, 3)
    x = rng.standard_normal((int(rng.integers(1, 3)), cin, *ext))
    w = rng.standard_normal((cout, cin // g, *k))
    b = rng.standard_normal(cout)
    fast = F.conv3d(Tensor(x), Tensor(w), Tensor(b), tuple(stride), tuple(pad), g).data
    return np.abs(fast - oracle.conv3d_reference(x, w, b, tuple(stride), tuple(pad), g)).max()


def _affine_case(rng):
    n, k, m = rng.integers(1, 9, 3)
    x, w, b = rng.standard_normal((n, k)), rng.standard_normal((m, k)), rng.standard_normal(m)
    return np.abs(F.affine(Tensor(x), Tensor(w), Tensor(b)).data - oracle.affine_reference(x, w, b)).max()


def _batchnorm_case(rng):
    c = int(rng.integers(1, 5))
    x = rng.standard_normal((int(rng.integers(2, 4)), c, *rng.integers(1, 9, 3))) * 3 + 1
    gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
    fast = F.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), np.zeros(c), np.ones(c), True).data
    return np.abs(fast - oracle.batchnorm_reference(x, gamma, beta)[0]).max()


def _pool_case(rng):
    ext = rng.integers(1, 9, 3)
    k = np.minimum(rng.integers(1, 4, 3), ext)
    pad = np.minimum(rng.integers(0, 2, 3), k // 2)
    stride = rng.integers(1, 3, 3)
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), *ext))
    args = (tuple(k), tuple(stride), tuple(pad))
    mx = np.abs(F.maxpool3d(Tensor(x), *args).data - oracle.maxpool3d_reference(x, *args)).max()
    av = np.abs(F.avgpool3d(Tensor(x), *args).data - oracle.avgpool3d_reference(x, *args)).max()
    return max(mx, av)


def test_criterion1_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for name, case in (("conv3d", _conv_case), ("affine", _affine_case), ("batchnorm", _batchnorm_case),
                       ("pooling", _pool_case)):
        worst[name] = max(case(rng) for _ in range(50))
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-10 for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"50 cases each, max abs diff {detail}; {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------

def test_criterion2_gradient_suite(report):
    t0 = time.perf_counter()
    results = gradsuite.run("all", seed=0)
    worst = max(results, key=lambda r: r.max_rel_error)
    elapsed = time.perf_counter() - t0
    names = {r.name.split("[")[0] for r in results}
    ok = worst.max_rel_error < 1e-4 and elapsed < 600 and any("stc" in n for n in names)
    report(2, ok, f"{len(results)} checks, worst {worst.name} rel err {worst.max_rel_error:.2e}; {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------

def test_criterion3_reference_shapes(report, capsys):
    problems = []
    for arch in ("stc-resnet-101", "stc-resnext-101"):
        code = main(["params", "--arch", arch, "--input", "3x16x112x112"])
        out = capsys.readouterr().out
        if code != 0:
            problems.append(f"{arch} exit {code}")
        for row in ("conv1", "res1", "res2", "res3", "res4"):
            h, w, t = REFERENCE_OUTPUT_SIZES[row]
            if f"{row:<14} {h}x{w}x{t}" not in out:
                problems.append(f"{arch} {row}")
        if "(match)" not in out:
            problems.append(f"{arch} recount")
        g = build(preset(arch))
        if param_count(g).total != oracle.recount_parameters(g) or not shape_check(g).ok:
            problems.append(f"{arch} in-process check")
        if arch == "stc-resnext-101" and "cardinality 32" not in out:
            problems.append("cardinality")
    report(3, not problems, "all five output rows, cardinality 32, recount match" if not problems
           else "; ".join(problems))


# 4 -------------------------------------------------------------------------

def test_criterion4_stc_invariants(report):
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 8, 3, 4, 4)))
    zero = STCBlockParams(8, 3, 4, "BOTH", dtype=np.float64, zero=True)
    half = np.array_equal(stc_forward(x, zero).data, 0.5 * x.data)

    tied = STCBlockParams(8, 1, 4, "BOTH", np.random.default_rng(1), dtype=np.float64)
    for a, b in (("tcb_w1", "scb_w1"), ("tcb_b1", "scb_b1"), ("tcb_w2", "scb_w2"), ("tcb_b2", "scb_b2")):
        getattr(tied, b).data[...] = getattr(tied, a).data
    getattr(tied, "tcb_b1").data[...] = rng.uniform(-0.5, 0.5, 2)
    tied.scb_b1.data[...] = tied.tcb_b1.data
    x1 = Tensor(rng.standard_normal((2, 8, 1, 4, 4)))
    collapse = np.array_equal(tcb_forward(x1, tied).data, scb_forward(x1, tied).data)

    p = STCBlockParams(6, 3, 3, "BOTH", np.random.default_rng(2), dtype=np.float64)
    perm = rng.permutation(6)
    q = STCBlockParams(6, 3, 3, "BOTH", dtype=np.float64, zero=True)
    flat = np.concatenate([t * 6 + perm for t in range(3)])
    q.tcb_w1.data[...] = p.tcb_w1.data[:, perm]
    q.tcb_w2.data[...] = p.tcb_w2.data[perm]
    q.tcb_b2.data[...] = p.tcb_b2.data[perm]
    q.scb_w1.data[...] = p.scb_w1.data[:, flat]
    q.scb_w2.data[...] = p.scb_w2.data[perm]
    q.scb_b2.data[...] = p.scb_b2.data[perm]
    q.tcb_b1.data[...] = p.tcb_b1.data
    q.scb_b1.data[...] = p.scb_b1.data
    xp = Tensor(rng.standard_normal((2, 6, 3, 3, 3)))
    err = np.abs(stc_forward(Tensor(xp.data[:, perm]), q).data - stc_forward(xp, p).data[:, perm]).max()
    ok = half and collapse and err < 1e-12
    report(4, ok, f"zero gates 0.5*X exact {half}; T=1 bitwise {collapse}; permutation err {err:.1e}")


# 5 -------------------------------------------------------------------------

def test_criterion5_toy_training(report, tmp_path):
    t0 = time.perf_counter()
    dataset = generate(SynthSpec(seed=42))
    optim = OptimConfig(lr=0.1, batch_size=16, lr_decay_policy="plateau", max_epochs=200,
                        target_train_acc=0.95, target_val_acc=0.85)
    rows, _ = run_experiment(preset("toy-stc-resnet"), optim, dataset, "family", tmp_path, seed=42)
    elapsed = time.perf_counter() - t0
    by_family = {r["setting"]: r for r in rows}
    stc, base = by_family["stc-resnet"], by_family["resnet3d"]
    written = list(csv.DictReader((tmp_path / "ablation-family.csv").open()))
    ok = (stc["train_acc"] >= 0.95 and stc["val_acc"] >= 0.85 and stc["epochs"] <= 200 and elapsed < 1800
          and [r["setting"] for r in written] == ["resnet3d", "stc-resnet"])
    report(5, ok, f"stc-resnet train {stc['train_acc']:.3f} val {stc['val_acc']:.3f} after {stc['epochs']} epochs; "
                  f"resnet3d baseline train {base['train_acc']:.3f} val {base['val_acc']:.3f} after "
                  f"{base['epochs']} epochs; {elapsed:.0f}s")


# 6 -------------------------------------------------------------------------

def test_criterion6_ablation_harness(report, tmp_path, capsys):
    expected = {"branch-mode": ["SCB", "TCB", "BOTH"], "stride": ["1", "2", "4", "16"],
                "temporal-depth": ["16", "32"]}
    found, problems = {}, []
    for axis, settings in expected.items():
        run_dir = tmp_path / axis
        code = main(["train", "--ablation", axis, "--epochs", "3", "--run-dir", str(run_dir)])
        capsys.readouterr()
        rows = list(csv.DictReader((run_dir / f"ablation-{axis}.csv").open())) if code == 0 else []
        found[axis] = [r["setting"] for r in rows]
        if found[axis] != settings:
            problems.append(f"{axis}: {found[axis]}")
        if axis == "temporal-depth" and [r["clip_len"] for r in rows] != ["4", "8"]:
            problems.append("temporal-depth clip lengths")
    report(6, not problems, "; ".join(f"{a} rows {s}" for a, s in found.items()) if not problems
           else "; ".join(problems))


# 7 -------------------------------------------------------------------------

def test_criterion7_transfer(report, tmp_path, capsys):
    t0 = time.perf_counter()
    code = main(["transfer", "--run-dir", str(tmp_path), "--data.seed", "0", "--optim.seed", "0",
                 "--transfer.steps", "500"])
    capsys.readouterr()
    elapsed = time.perf_counter() - t0
    summary = json.loads((tmp_path / "summary.json").read_text())
    probe_rows = list(csv.DictReader((tmp_path / "probe.csv").open()))
    ckpt = load_checkpoint(tmp_path / "transfer.stcn")
    ok = (code == 0 and summary["steps"] == 500 and summary["teacher_unchanged"]
          and summary["heldout_accuracy"] >= 0.75 and elapsed < 900 and len(probe_rows) == 1
          and {"student", "head", "teacher"} <= set(ckpt.groups.values()))
    report(7, ok, f"teacher unchanged {summary['teacher_unchanged']}; held-out matching accuracy "
                  f"{summary['heldout_accuracy']:.3f}; probe transferred {summary['probe_transferred']:.3f} "
                  f"random {summary['probe_random']:.3f}; {elapsed:.0f}s")


# 8 -------------------------------------------------------------------------

def test_criterion8_persistence(report, tmp_path, monkeypatch):
    monkeypatch.setenv("STCNET_THREADS", "1")
    dataset = generate(SynthSpec(seed=42, samples_per_class=24))
    with thread_limit():
        g = build(preset("toy-stc-resnet"), seed=8)
        x = Tensor(np.random.default_rng(8).standard_normal((4, 1, 8, 16, 16)).astype(np.float32))
        g.eval()
        with no_grad():
            before = g(x).data
        tensors, groups = model_tensors(g)
        save_checkpoint(Checkpoint(tensors, groups, g.config.to_dict(), g.config.digest()), tmp_path / "m.stcn")
        fresh = build(preset("toy-stc-resnet"), seed=0)
        restore_model(fresh, load_checkpoint(tmp_path / "m.stcn", g.config.digest()).tensors)
        fresh.eval()
        with no_grad():
            logits_ok = fresh(x).data.tobytes() == before.tobytes()

        def trainer():
            return Trainer(build(preset("toy-stc-resnet"), 42), OptimConfig(max_epochs=3), dataset, seed=42)

        full = trainer().fit()
        trainer().fit(max_epochs=1, checkpoint_path=tmp_path / "ck.stcn")
        resumed = trainer()
        resumed.resume(tmp_path / "ck.stcn")
        rec = resumed.fit()
    same = all(rec.column(k)[1:] == full.column(k)[1:] for k in CSV_FIELDS[:-1])
    report(8, logits_ok and same and rec.epochs == 3,
           f"logits bit-identical {logits_ok}; resumed epochs 1-2 identical {same} "
           f"(train loss {rec.column('train_loss')[1:]})")
