"""Acceptance criteria; each test prints one PASS/FAIL line with its measured value."""

import math
import time

import numpy as np
import pytest

from multimode_asr import tensor as tt
from multimode_asr.data import TaskSpec, gen_dataset
from multimode_asr.evaluate import context_sweep
from multimode_asr.experiments import StudyConfig, run_study, trend_checks
from multimode_asr.losses import (
    brute_force_transducer_loss,
    distill_kl,
    dual_mode_loss,
    merge_posteriors,
    mode_pair_loss,
    multi_mode_loss,
    transducer_loss,
)
from multimode_asr.masking import (
    Constrained,
    ContextSchedule,
    Fixed,
    TiedNormal,
    UntiedNormal,
    latency_ms,
    receptive_future,
    sample_schedule,
)
from multimode_asr.model import ModelConfig, Transducer, dump_params
from multimode_asr.tensor import Tensor
from multimode_asr.train import TrainConfig, format_log, train


def test_1_loss_matches_enumeration(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        T, U, V = int(rng.integers(1, 6)), int(rng.integers(0, 5)), int(rng.integers(2, 6))
        lp = tt.log_softmax(Tensor(rng.normal(size=(T, U + 1, V)) * 2)).data
        y = rng.integers(1, V, size=U)
        dp = transducer_loss(Tensor(lp), y).item()
        bf = brute_force_transducer_loss(lp, y)
        worst = max(worst, abs(dp - bf) / max(abs(bf), 1e-300))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and secs < 10
    report("1 loss oracle", ok, f"max rel err {worst:.2e} over 200 lattices in {secs:.2f}s")
    assert ok


GRAD_CFG = ModelConfig(L_audio=2, L_label=1, D=8, D_ff=8, heads=2, D_joint=8, V=4, F=3, downsample=2)


def test_2_gradient_suite(report):
    model = Transducer(GRAD_CFG)
    params = model.init_params(7)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 6, GRAD_CFG.F))  # T = 3
    y = rng.integers(1, GRAD_CFG.V, size=(1, 2))  # U = 2
    sched = ContextSchedule.of([1, 0])
    full = ContextSchedule.full(GRAD_CFG.L_audio)
    with tt.no_grad():
        teacher = merge_posteriors(model.forward(params, x, y, full), y)
    cases = {
        "transducer": lambda p: transducer_loss(model.forward(p, x, y, sched), y),
        "distill": lambda p: distill_kl(merge_posteriors(model.forward(p, x, y, sched), y), teacher, 1),
        "objective": lambda p: mode_pair_loss(model, p, x, y, sched, shift=1, teacher=teacher).total,
    }
    t0 = time.perf_counter()
    results = {k: tt.finite_difference_check(f, params, tol=1e-4, max_coords=250, seed=3) for k, f in cases.items()}
    secs = time.perf_counter() - t0
    ok = all(r.passed and r.n_coords >= 200 for r in results.values()) and secs < 60
    detail = ", ".join(f"{k} {r.max_rel_error:.1e} ({r.n_coords} coords)" for k, r in results.items())
    report("2 gradient suite", ok, f"{detail}; {secs:.1f}s")
    assert ok


def test_3_receptive_field_soundness(report):
    cfg = ModelConfig(L_audio=4, L_label=1, D=16, D_ff=32, heads=2, D_joint=8, V=6, F=5, downsample=4)
    model = Transducer(cfg)
    params = model.init_params(11)
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    beyond_max, at_min = 0.0, math.inf
    for _ in range(20):
        sched = ContextSchedule.of([int(c) for c in rng.integers(0, 3, size=cfg.L_audio)])
        C = receptive_future(sched)
        T = C + 6
        x = rng.normal(size=(1, 4 * T, cfg.F))
        t = int(rng.integers(0, T - C))
        with tt.no_grad():
            enc = lambda z: model.encode_audio(model.frontend(z, params), params, sched).data[0, t]
            base = enc(x)
            last_visible = 4 * (t + C) + 3
            z = x.copy()
            z[0, last_visible + 1:] += rng.normal(size=z[0, last_visible + 1:].shape)
            beyond_max = max(beyond_max, np.abs(enc(z) - base).max())
            z = x.copy()
            z[0, last_visible - 3:last_visible + 1] += rng.normal(size=(4, cfg.F))
            at_min = min(at_min, np.abs(enc(z) - base).max())
    secs = time.perf_counter() - t0
    ok = beyond_max < 1e-10 and at_min > 1e-6 and secs < 30
    report("3 receptive field", ok, f"beyond bound {beyond_max:.1e}, at bound {at_min:.1e}, {secs:.1f}s")
    assert ok


def test_4_sampler_contracts(report):
    rng = np.random.default_rng(4)
    n = 10_000
    violations = sum(sample_schedule(Constrained(12, 2.0), 12, rng).total() > 12 for _ in range(n))
    zero = np.mean([sample_schedule(TiedNormal(0.0, 1.0), 4, rng).per_layer[0] == 0 for _ in range(n)])
    tied = np.array([sample_schedule(TiedNormal(0.0, 1.0), 4, rng).per_layer[0] for _ in range(n)])
    untied = np.array([sample_schedule(UntiedNormal(0.0, 1.0), 4, rng).per_layer[1] for _ in range(n)])
    gap = max(abs(np.mean(tied == c) - np.mean(untied == c)) for c in range(6))
    ok = violations == 0 and abs(zero - 0.6827) <= 0.02 and gap <= 0.02
    report("4 sampler contracts", ok, f"{violations} budget violations, P(c=0)={zero:.4f}, max marginal gap {gap:.4f}")
    assert ok


def test_5_latency_arithmetic(report):
    ms = latency_ms(ContextSchedule.of([1] * 12), frame_shift_ms=10.0, downsample=4, frontend_lookahead_frames=0)
    ok = ms == 480.0
    report("5 latency", ok, f"[1]x12 -> {ms} ms")
    assert ok


def test_6_degenerate_identities(report):
    cfg = ModelConfig(L_audio=3, L_label=1, D=16, D_ff=16, heads=2, D_joint=8, V=5, F=4, downsample=2)
    model = Transducer(cfg)
    params = model.init_params(6)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 10, cfg.F))
    y = rng.integers(1, cfg.V, size=(2, 3))
    dual = dual_mode_loss(model, params, x, y, 1).values()
    multi = multi_mode_loss(model, params, x, y, Fixed(1), rng).values()
    with tt.no_grad():
        sat = model.forward(params, x, y, ContextSchedule.of([5] * 3)).data
        full = model.forward(params, x, y, ContextSchedule.full(3)).data
    same = mode_pair_loss(model, params, x, y, ContextSchedule.full(3)).values()["l_distill"]
    ok = multi == dual and np.array_equal(sat, full) and same == 0.0
    report("6 degenerate identities", ok,
           f"multi==dual {multi == dual}, saturated==full {np.array_equal(sat, full)}, KL(same)={same}")
    assert ok


def test_8_determinism(report):
    cfg = ModelConfig(L_audio=2, L_label=1, D=16, D_ff=16, heads=2, D_joint=8)
    task = TaskSpec(min_tokens=2, max_tokens=5)
    tr, va, te = gen_dataset(task, 40, 1), gen_dataset(task, 8, 2), gen_dataset(task, 8, 3)
    tc = TrainConfig(steps=20, batch_size=4, warmup_steps=5, hold_steps=5, eval_every=5, seed=9)
    scheds = [ContextSchedule.of([0, 0]), ContextSchedule.full(2)]

    def once():
        res = train(cfg, tr, va, tc)
        rep = context_sweep(Transducer(cfg), res.last, te, scheds, "multi", tc.sampler)
        return format_log(res.log), dump_params(cfg, res.last), rep.to_text() + rep.to_csv()

    a, b = once(), once()
    ok = a == b
    report("8 determinism", ok, "log, checkpoint and report identical" if ok else "outputs differ")
    assert ok


@pytest.mark.slow
def test_7_trend_reproduction(report):
    cfg = StudyConfig()
    result = run_study(cfg)
    print("\n" + result.table())
    checks = trend_checks(result, cfg)
    for key, (ok, detail) in checks.items():
        report(f"7({key}) trend", ok, detail)
    timing_ok = result.seconds <= 30 * 60
    report("7 runtime", timing_ok, f"{result.seconds / 60:.1f} min for {len(cfg.seeds)} seeds")
    assert timing_ok and all(ok for ok, _ in checks.values())
