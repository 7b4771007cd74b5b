import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multimode_asr import tensor as tt
from multimode_asr.losses import (
    brute_force_transducer_loss,
    distill_kl,
    dual_mode_loss,
    merge_posteriors,
    mode_pair_loss,
    multi_mode_loss,
    transducer_loss,
    transducer_nll,
)
from multimode_asr.masking import ContextSchedule, Fixed, FullContext, TiedUniform
from multimode_asr.model import ModelConfig, Transducer
from multimode_asr.tensor import Tensor


def random_lattice(rng, T, U, V):
    return tt.log_softmax(Tensor(rng.normal(size=(T, U + 1, V)) * 2)).data


def test_loss_matches_brute_force_on_random_lattices():
    rng = np.random.default_rng(0)
    for _ in range(60):
        T, U, V = int(rng.integers(1, 6)), int(rng.integers(0, 4)), int(rng.integers(2, 5))
        lp = random_lattice(rng, T, U, V)
        y = rng.integers(1, V, size=U)
        dp = transducer_loss(Tensor(lp), y).item()
        assert abs(dp - brute_force_transducer_loss(lp, y)) <= 1e-9 * max(1.0, abs(dp))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 3), st.integers(2, 4), st.integers(0, 2**31))
def test_loss_is_nonnegative_and_matches_enumeration(T, U, V, seed):
    rng = np.random.default_rng(seed)
    lp = random_lattice(rng, T, U, V)
    y = rng.integers(1, V, size=U)
    dp = transducer_loss(Tensor(lp), y).item()
    assert dp >= 0
    assert dp == pytest.approx(brute_force_transducer_loss(lp, y), rel=1e-9, abs=1e-12)


def test_two_frame_one_label_by_hand():
    rng = np.random.default_rng(3)
    lp = random_lattice(rng, 2, 1, 3)
    p = np.exp(lp)
    y = 2
    # emit at t=0 then two blanks, or blank then emit at t=1 then blank
    prob = p[0, 0, y] * p[0, 1, 0] * p[1, 1, 0] + p[0, 0, 0] * p[1, 0, y] * p[1, 1, 0]
    assert transducer_loss(Tensor(lp), [y]).item() == pytest.approx(-math.log(prob), rel=1e-12)


@pytest.mark.parametrize("T,U,V", [(1, 0, 2), (3, 2, 4), (5, 3, 3), (4, 4, 2)])
def test_uniform_lattice_counts_paths(T, U, V):
    # every alignment has probability V^-(T+U); there are C(T-1+U, U) of them
    lp = np.full((T, U + 1, V), -math.log(V))
    y = np.ones(U, dtype=int)
    expect = (T + U) * math.log(V) - math.log(math.comb(T - 1 + U, U))
    assert transducer_loss(Tensor(lp), y).item() == pytest.approx(expect, rel=1e-12)


def test_batched_nll_is_per_utterance():
    rng = np.random.default_rng(1)
    lp = np.stack([random_lattice(rng, 3, 2, 4) for _ in range(3)])
    y = rng.integers(1, 4, size=(3, 2))
    nll = transducer_nll(Tensor(lp), y).data
    for b in range(3):
        assert nll[b] == pytest.approx(brute_force_transducer_loss(lp[b], y[b]), rel=1e-12)
    assert transducer_loss(Tensor(lp), y).item() == pytest.approx(nll.mean(), rel=1e-14)


def test_loss_shape_errors():
    with pytest.raises(ValueError):
        transducer_loss(Tensor(np.zeros((2, 3, 4))), [1, 1, 1])
    with pytest.raises(ValueError):
        brute_force_transducer_loss(np.zeros((30, 16, 3)), [1] * 15)


@pytest.mark.parametrize("T,U", [(1, 0), (2, 1), (4, 3)])
def test_loss_gradient_matches_finite_differences(T, U):
    rng = np.random.default_rng(T + U)
    y = rng.integers(1, 4, size=U)
    params = {"z": Tensor(rng.normal(size=(T, U + 1, 4)))}
    rep = tt.finite_difference_check(lambda p: transducer_loss(tt.log_softmax(p["z"]), y), params, tol=1e-6, max_coords=None)
    assert rep.passed, rep


def test_merge_examples():
    probs = np.array([[[0.1, 0.2, 0.6, 0.1], [0.3, 0.2, 0.4, 0.1]]])  # T=1, U=1, y=(2,)
    m = merge_posteriors(Tensor(np.log(probs)), [2]).data
    np.testing.assert_allclose(m[0, 0], [0.1, 0.6, 0.3], rtol=1e-12)
    np.testing.assert_allclose(m[0, 1], [0.3, 0.0, 0.7], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(2, 6), st.integers(0, 2**31))
def test_merged_posteriors_are_distributions(T, U, V, seed):
    rng = np.random.default_rng(seed)
    m = merge_posteriors(Tensor(random_lattice(rng, T, U, V)), rng.integers(1, V, size=U)).data
    assert m.shape == (T, U + 1, 3)
    assert (m >= 0).all()
    np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-12)
    assert (m[:, -1, 1] == 0).all()


def test_kl_examples():
    s = Tensor(np.array([[[1.0, 0.0, 0.0]]]))
    t = Tensor(np.array([[[0.5, 0.5, 0.0]]]))
    assert distill_kl(s, t).item() == pytest.approx(math.log(2), rel=1e-12)
    assert distill_kl(t, t).item() == 0.0


def test_kl_shift_aligns_student_to_earlier_teacher():
    rng = np.random.default_rng(0)
    teacher = rng.dirichlet(np.ones(3), size=(4, 2))
    student = np.roll(teacher, 1, axis=0)
    student[0] = rng.dirichlet(np.ones(3), size=2)
    assert distill_kl(Tensor(student), Tensor(teacher), shift=1).item() == pytest.approx(0.0, abs=1e-15)
    assert distill_kl(Tensor(student), Tensor(teacher), shift=0).item() > 0.01
    with pytest.raises(ValueError):
        distill_kl(Tensor(student), Tensor(teacher), shift=4)


def test_kl_gradient_ignores_teacher():
    rng = np.random.default_rng(2)
    s = Tensor(rng.dirichlet(np.ones(3), size=(3, 2)), requires_grad=True)
    t = Tensor(rng.dirichlet(np.ones(3), size=(3, 2)), requires_grad=True)
    distill_kl(s, t).backward()
    assert t.grad is None or not np.any(t.grad)
    assert np.abs(s.grad).max() > 0


CFG = ModelConfig(L_audio=2, L_label=1, D=8, D_ff=8, heads=2, D_joint=4, V=4, F=3, downsample=2)


@pytest.fixture(scope="module")
def tiny():
    model = Transducer(CFG)
    rng = np.random.default_rng(0)
    return model, model.init_params(0), rng.normal(size=(2, 6, CFG.F)), rng.integers(1, CFG.V, size=(2, 2))


def test_multi_with_point_mass_equals_dual(tiny):
    model, params, x, y = tiny
    dual = dual_mode_loss(model, params, x, y, 1).values()
    for spec in (Fixed(1), TiedUniform(1, 1)):
        multi = multi_mode_loss(model, params, x, y, spec, np.random.default_rng(9)).values()
        assert multi == dual


def test_full_context_sampler_collapses_streaming_branch(tiny):
    model, params, x, y = tiny
    v = multi_mode_loss(model, params, x, y, FullContext(), np.random.default_rng(0)).values()
    assert v["l_stream"] == v["l_full"]
    assert v["l_distill"] == 0.0


def test_total_is_weighted_sum(tiny):
    model, params, x, y = tiny
    b = mode_pair_loss(model, params, x, y, ContextSchedule.of([0, 1]), weights=(0.5, 2.0, 3.0))
    v = b.values()
    assert v["total"] == pytest.approx(0.5 * v["l_stream"] + 2.0 * v["l_full"] + 3.0 * v["l_distill"], rel=1e-14)


def test_baseline_weights_skip_teacher(tiny):
    model, params, x, y = tiny
    b = mode_pair_loss(model, params, x, y, ContextSchedule.of([0, 0]), weights=(1.0, 0.0, 0.0))
    assert b.values()["l_full"] == 0.0 and b.total.item() == b.l_stream.item()


def test_objective_gradient_with_frozen_teacher(tiny):
    model, params, x, y = tiny
    sched = ContextSchedule.of([0, 1])
    full = ContextSchedule.full(CFG.L_audio)
    with tt.no_grad():
        teacher = merge_posteriors(model.forward(params, x, y, full), y)
    f = lambda p: mode_pair_loss(model, p, x, y, sched, shift=1, teacher=teacher).total
    rep = tt.finite_difference_check(f, params, tol=1e-4, max_coords=200, seed=1)
    assert rep.n_coords >= 200
    assert rep.passed, rep
