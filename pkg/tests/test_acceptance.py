"""Acceptance criteria, each reported as one PASS/FAIL line with measured
and reference values.  The training-based criteria share runs through
module fixtures; the whole file takes roughly 20 minutes on one CPU."""

import os
import statistics
import time

import numpy as np
import pytest

import oracles as O
from conftest import ACCEPTANCE_LINES
from dsmc import cli
from dsmc import data as D
from dsmc import functional as F
from dsmc.config import TrainConfig
from dsmc.model import DSMC, ModelConfig
from dsmc.mscu import MSCU, MSCUConfig
from dsmc.tensor import Tensor
from dsmc.training import Trainer, checkpoint_bytes, evaluate, parse_checkpoint, restore
from dsmc.u3drdn import U3DRDN, u3drdn_flops
from grad_cases import CASES, THRESHOLD, run_case

EVAL_FRAMES = [1, 3, 5]
LEARN_ITERS = 1000
ABLATION_ITERS = 600
DUAL_ITERS = 300
DUAL_SEEDS = (0, 1, 2)


def report(n, ok, text):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ---------------------------------------------------------------- shared desk data and runs

@pytest.fixture(scope="module")
def desk_data():
    # 8 LR px/frame of motion = 32 px at HR
    train = [D.synth_video(D.MotionSpec(32, "translate", seed=i, angle=37 * i), 10, 128, f"t{i}")
             for i in range(8)]
    test = [D.synth_video(D.MotionSpec(32, "translate", seed=100 + i, angle=50 * i + 10), 7, 128, f"e{i}")
            for i in range(3)]
    bic = evaluate(None, test, frames=EVAL_FRAMES).mean()
    return train, test, bic


def _train(train, ablations=(), iters=ABLATION_ITERS, seed=0, snapshot=None, test=None, **tkw):
    model = DSMC(ModelConfig.desk(seed=seed), ablations)
    tr = Trainer(model, D.ClipDataset(train), TrainConfig.desk(iterations=iters, seed=seed, log_every=100, **tkw))
    snap = None
    if snapshot:
        tr.run(snapshot)
        snap = evaluate(model, test, frames=EVAL_FRAMES).mean()
    tr.run(iters)
    return model, snap


@pytest.fixture(scope="module")
def baseline(desk_data):
    train, test, _ = desk_data
    t0 = time.perf_counter()
    model, at_ablation = _train(train, iters=LEARN_ITERS, snapshot=ABLATION_ITERS, test=test)
    final = evaluate(model, test, frames=EVAL_FRAMES).mean()
    return {"final": final, "ablation": at_ablation, "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    errors = {name: run_case(build) for name, build in CASES}
    dt = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(e < THRESHOLD for e in errors.values()) and dt < 120
    report(1, ok, f"{len(errors)} op families, worst {worst} rel err {errors[worst]:.2e} "
                  f"(limit {THRESHOLD:.0e}), {dt:.1f} s (limit 120 s)")


# ---------------------------------------------------------------- 2

def test_criterion_2_operator_oracles():
    rng = np.random.default_rng(2)
    errs = {}
    info = {}
    # f32 in the working regime (image-range inputs, init-scale weights), and
    # f64 on unit-normal data where accumulation noise is far below 1e-6
    for dtype, x, w, b in (
            (np.float32, rng.uniform(0, 1, (2, 3, 9, 8)), rng.standard_normal((4, 3, 3, 3)) * np.sqrt(2 / 27),
             rng.standard_normal(4) * 0.1),
            (np.float64, rng.standard_normal((2, 3, 9, 8)), rng.standard_normal((4, 3, 3, 3)),
             rng.standard_normal(4))):
        x, w, b = x.astype(dtype), w.astype(dtype), b.astype(dtype)
        for stride, pad in ((1, 1), (2, 0)):
            got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
            ref = O.conv2d_loops(x.astype(np.float64), w, b, stride, pad)
            errs[f"conv2d {np.dtype(dtype).name} s{stride}p{pad}"] = np.abs(got - ref).max()
    for dtype, x3, w3 in (
            (np.float32, rng.uniform(0, 1, (1, 2, 5, 6, 7)), rng.standard_normal((3, 2, 3, 3, 3)) * np.sqrt(2 / 54)),
            (np.float64, rng.standard_normal((1, 2, 5, 6, 7)), rng.standard_normal((3, 2, 3, 3, 3)))):
        x3, w3 = x3.astype(dtype), w3.astype(dtype)
        for stride, pad in (((1, 1, 1), (1, 1, 1)), ((2, 1, 1), (0, 1, 1))):
            got = F.conv3d(Tensor(x3), Tensor(w3), None, stride, pad).data
            ref = O.conv3d_loops(x3.astype(np.float64), w3, None, stride, pad)
            errs[f"conv3d {np.dtype(dtype).name} s{stride}"] = np.abs(got - ref).max()
    xn = rng.standard_normal((2, 3, 9, 8)).astype(np.float32)
    wn = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    info["conv2d f32 unit-normal"] = np.abs(F.conv2d(Tensor(xn), Tensor(wn), None, 1, 1).data
                                            - O.conv2d_loops(xn.astype(np.float64), wn, None, 1, 1)).max()
    x = rng.standard_normal((2, 3, 9, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    off = np.zeros((2, 18, 9, 8), np.float32)
    got = F.deform_conv2d(Tensor(x), Tensor(off), Tensor(w), Tensor(b), pad=1).data
    errs["deform zero-offset vs conv2d"] = np.abs(got - F.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data).max()
    x64, w64, b64 = x.astype(np.float64), w.astype(np.float64), b.astype(np.float64)
    off = rng.uniform(-1.5, 1.5, (2, 18, 9, 8))
    got = F.deform_conv2d(Tensor(x64), Tensor(off), Tensor(w64), Tensor(b64), pad=1).data
    errs["deform f64 fractional offsets vs loops"] = np.abs(got - O.deform_conv2d_loops(x64, off, w64, b64, pad=1)).max()
    xs = rng.standard_normal((2, 12, 3, 4)).astype(np.float32)
    errs["pixel shuffle"] = np.abs(F.pixel_shuffle2d(Tensor(xs), 2).data - O.pixel_shuffle_index(xs, 2)).max()

    m = MSCU(MSCUConfig(in_channels=6, channels=4, factors=(2, 2), resnet_depth=1),
             rng=np.random.default_rng(3)).astype(np.float64)
    for _, p in m.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.2
    feats = Tensor(rng.standard_normal((1, 6, 4, 4)))
    center = Tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
    center_up = F.bicubic_resize(center, 2, antialias=False)
    got = m.stage(m.initial_state(feats, center), center_up)
    image, residual = O.mscu_stage_transcription(m.stages[0], feats, center_up)
    errs["mscu stage"] = max(np.abs(got.image.data - image.data).max(),
                             np.abs(got.residual.data - residual.data).max())
    worst = max(errs, key=errs.get)
    ok = all(v <= 1e-6 for v in errs.values()) and errs["pixel shuffle"] == 0
    report(2, ok, f"{len(errs)} oracle comparisons, worst {worst} max abs err {errs[worst]:.2e} (limit 1e-6); "
                  f"info: conv2d f32 on unit-normal data {info['conv2d f32 unit-normal']:.1e} (f32 accumulation)")


# ---------------------------------------------------------------- 3

def test_criterion_3_zero_network_is_bicubic():
    model = DSMC(ModelConfig.desk())
    for _, p in model.named_parameters():
        p.data[...] = 0
    model.eval()
    win = np.random.default_rng(3).uniform(0, 1, (2, 5, 3, 12, 10)).astype(np.float32)
    out = model(win).data
    ref = F.bicubic_resize(Tensor(win[:, 2]), 4, antialias=False).data
    err = float(np.abs(out - ref).max())
    lo, hi = float(out.min()), float(out.max())
    ok = err <= 1e-5 and -0.5 <= lo and hi <= 1.5
    report(3, ok, f"max |DSMC(0) - bicubic x4| = {err:.2e} (limit 1e-5); "
                  f"output range [{lo:.3f}, {hi:.3f}] within [-0.5, 1.5]")


# ---------------------------------------------------------------- 4

def test_criterion_4_flops_ratio():
    shape = (1, 64, 5, 64, 64)
    res = u3drdn_flops(ModelConfig().u3drdn_config(), shape)
    ok = 3.5 <= res["ratio"] <= 4.4
    report(4, ok, f"flat/U-shaped FLOPs ratio {res['ratio']:.3f} at input {shape} "
                  f"({res['flat_flops'] / 1e9:.1f} / {res['u3drdn_flops'] / 1e9:.1f} GFLOPs); "
                  f"reference 509.17/129.18 = 3.94, band [3.5, 4.4]")


# ---------------------------------------------------------------- 5

def test_criterion_5_parameter_counts():
    cfg = ModelConfig()
    u = U3DRDN(cfg.u3drdn_config()).num_parameters()
    rep = DSMC(cfg).param_report()
    total = rep["total"]
    u_ok = abs(u / 2.52e6 - 1) <= 0.2
    t_ok = abs(total / 11.58e6 - 1) <= 0.2
    report(5, u_ok and t_ok, f"U3D-RDN {u:,} vs 2.52M ({100 * (u / 2.52e6 - 1):+.1f}%), "
                             f"full model {total:,} vs 11.58M ({100 * (total / 11.58e6 - 1):+.1f}%), band +-20%")


# ---------------------------------------------------------------- 6

def _pipeline(hr_dir, tmp_path, capsys):
    out = tmp_path / "prepared"
    assert cli.main(["prepare", "--hr-dir", str(hr_dir), "--out-dir", str(out), "--scale", "4"]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--data", str(out), "--bicubic"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1].split("\t")
    return float(last[1].split()[0]), float(last[2])


def test_criterion_6_bicubic_anchor(tmp_path, capsys):
    reds = os.environ.get("DSMC_REDS4")
    if reds:
        p, s = _pipeline(reds, tmp_path, capsys)
        ok = abs(p - 23.72) <= 0.15 and abs(s - 0.7559) <= 0.01
        report(6, ok, f"REDS4 bicubic {p:.2f} dB / {s:.4f} vs 23.72 dB / 0.7559 (+-0.15 dB, +-0.01)")
        return
    hr = tmp_path / "hr"
    D.write_clip(D.smooth_gradient_clip(3, 64), hr / "gradient", "png")
    p, s = _pipeline(hr, tmp_path, capsys)
    report(6, p > 40, f"REDS4 absent (set DSMC_REDS4); smooth-gradient prepare->bicubic->eval "
                      f"{p:.2f} dB / {s:.4f} (needs > 40 dB)")


# ---------------------------------------------------------------- 7

def test_criterion_7_desk_learning(desk_data, baseline):
    _, _, bic = desk_data
    p, s = baseline["final"]
    ok = p >= bic[0] + 0.3 and baseline["seconds"] < 20 * 60
    report(7, ok, f"desk model after {LEARN_ITERS} iterations {p:.2f} dB / {s:.4f} vs bicubic "
                  f"{bic[0]:.2f} dB / {bic[1]:.4f} (needs >= +0.3 dB, got {p - bic[0]:+.2f}); "
                  f"{baseline['seconds'] / 60:.1f} min (limit 20)")


# ---------------------------------------------------------------- 8

def test_criterion_8_directional_ablations(desk_data, baseline):
    train, test, _ = desk_data
    base = baseline["ablation"][0]
    parts, ok = [], True
    for flag in ("no_mscu_comm", "no_mscu", "no_u3drdn"):
        model, _ = _train(train, (flag,))
        p = evaluate(model, test, frames=EVAL_FRAMES).mean()[0]
        ok &= base > p
        parts.append(f"{flag} {p:.2f}")

    cb_only, dual = [], []
    terms = dict(primal_terms=("cb",), dual_terms=("cb",), perceptual_weight=0.0)
    for seed in DUAL_SEEDS:
        for weight, out in ((0.0, cb_only), (0.1, dual)):
            model, _ = _train(train, iters=DUAL_ITERS, seed=seed, dual_weight=weight, **terms)
            out.append(evaluate(model, test, frames=EVAL_FRAMES).mean()[0])
    spread = statistics.pstdev(cb_only + dual) if len(cb_only) > 1 else 0.0
    m_cb, m_dual = statistics.mean(cb_only), statistics.mean(dual)
    dual_ok = m_dual >= m_cb - spread
    report(8, ok and dual_ok,
           f"{ABLATION_ITERS} iterations: baseline {base:.2f} dB > {', '.join(parts)}; "
           f"{DUAL_ITERS} iterations x {len(DUAL_SEEDS)} seeds: Cb+dualCb mean {m_dual:.2f} dB "
           f"vs Cb-only mean {m_cb:.2f} dB (pooled std {spread:.2f}, needs dual >= Cb-only - std)")


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism_and_persistence(desk_data):
    train = desk_data[0][:2]

    def run(n, resume_from=None):
        model = DSMC(ModelConfig.desk())
        tr = Trainer(model, D.ClipDataset(train), TrainConfig.desk(iterations=n))
        if resume_from is not None:
            tr.resume(parse_checkpoint(resume_from))
        tr.run(n)
        return tr

    a, b = run(10), run(10)
    curve_a = [r["total"] for r in a.history]
    identical = curve_a == [r["total"] for r in b.history]

    half = run(5)
    raw = checkpoint_bytes(half.model, half.opt, half.iteration)
    fresh = DSMC(ModelConfig.desk())
    tr = Trainer(fresh, D.ClipDataset(train), TrainConfig.desk())
    ck = parse_checkpoint(raw)
    restore(ck, fresh, tr.opt)
    roundtrip = checkpoint_bytes(fresh, tr.opt, ck["iteration"]) == raw

    resumed = run(6, resume_from=raw)
    gap = abs(resumed.history[0]["total"] - curve_a[5])
    ok = identical and roundtrip and gap <= 1e-6
    report(9, ok, f"10-step loss curves bit-identical: {identical}; checkpoint byte round-trip: {roundtrip}; "
                  f"resume next-step loss gap {gap:.1e} (limit 1e-6)")
