import math
import warnings

import numpy as np
import pytest

from bffrl.approximator import TabularValues, init_params
from bffrl.env import ContinuousEnvSpec, Trajectory, jump, make_rng, resample_next, ring_chain, simulate
from bffrl.errors import DivergenceError, EstimatorError, SpecError
from bffrl.residual import Estimator, WindowBatch, estimate_gradient
from bffrl.tabular import TabularSample, exact_value, sample_update
from bffrl.trainer import (
    BiasWarning,
    ErrorTrace,
    ReferenceSolution,
    TrainConfig,
    build_reference,
    cached_reference,
    eta_diagnostic,
    evaluate_error,
    evaluation_grid,
    make_batches,
    train,
    value_profile_csv,
)
from bffrl.trainer import _default_dual, _perm_rng, _Recorder, _train_minibatch

from conftest import random_chain

ALL = list(Estimator)


def test_make_batches_counting():
    batches = make_batches(10, 4, needs_future=True, seed=0)
    assert len(batches) == 2 and all(b.size == 4 for b in batches)
    used = np.concatenate(batches)
    assert len(set(used.tolist())) == 8 and used.min() >= 0 and used.max() <= 8


def test_make_batches_deterministic_and_epoch_dependent():
    a = make_batches(1000, 7, seed=3, epoch=0)
    b = make_batches(1000, 7, seed=3, epoch=0)
    c = make_batches(1000, 7, seed=3, epoch=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_make_batches_too_short():
    with pytest.raises(SpecError, match="trajectory too short"):
        make_batches(10, 20)


def test_usable_window_count(ring):
    t = simulate(ring, length=10, seed=0)
    assert sum(b.size for b in make_batches(t, 1)) == 9
    assert sum(b.size for b in make_batches(t, 1, needs_future=False)) == 10


def test_config_validation():
    assert TrainConfig(tau=0.1, batch_size=1000).eta == pytest.approx(1e-4)
    for kw in (dict(tau=-1.0), dict(batch_size=0), dict(epochs=0), dict(tau=float("inf"))):
        with pytest.raises(SpecError):
            TrainConfig(**kw)
    with pytest.raises(ValueError):
        TrainConfig(estimator="nope")


def test_evaluate_error_examples(ring):
    ref = build_reference(ring)
    assert evaluate_error(TabularValues(ref.values), ref) == 0.0
    zero = ReferenceSolution("exact-tabular", np.arange(32), np.zeros(32))
    e0 = np.zeros(32)
    e0[0] = 1.0
    assert evaluate_error(TabularValues(e0), zero) == 1.0


def test_evaluate_error_discrete_formula(ring):
    # e = sqrt(sum_i (V(2 pi i / n) - V*_i)^2) for a network fed state angles
    ref = build_reference(ring)
    net = init_params("mlp", 2, n_states=32)
    theta_net = init_params("mlp", 2)
    vals = theta_net.value(2 * np.pi * np.arange(32) / 32)
    assert evaluate_error(net, ref) == pytest.approx(math.sqrt(np.sum((vals - ref.values) ** 2)), rel=1e-12)


def test_reference_grids(ring, sde):
    assert np.array_equal(evaluation_grid(ring), np.arange(32))
    g = evaluation_grid(sde)
    assert g.size == 256 and g[0] > 0 and g[-1] == 2 * np.pi
    ref = build_reference(ring)
    assert ref.kind == "exact-tabular" and np.array_equal(ref.values, exact_value(ring))
    with pytest.raises(SpecError):
        build_reference(sde, "exact-tabular")


@pytest.mark.parametrize("kind", ALL)
def test_zero_step_size_gives_flat_trace(kind, ring):
    t = simulate(ring, length=500, seed=1)
    v0 = TabularValues(np.linspace(0, 1, 32))
    final, trace = train(ring, t, v0, TrainConfig(kind, tau=0.0, batch_size=1, eval_every=50), build_reference(ring))
    assert np.array_equal(final.values, v0.values)
    assert len(set(trace.errors)) == 1 and trace.steps[0] == 0 and trace.steps[-1] == 499


@pytest.mark.parametrize("kind", ALL)
def test_training_is_deterministic(kind, sde):
    t = simulate(sde, length=3000, seed=1)
    ref = ReferenceSolution("test", evaluation_grid(sde), np.zeros(256))
    cfg = TrainConfig(kind, tau=0.1, batch_size=100, seed=4, eval_every=5)
    a, ta = train(sde, t, init_params("mlp", 1), cfg, ref)
    b, tb = train(sde, t, init_params("mlp", 1), cfg, ref)
    assert np.array_equal(a.params, b.params)
    assert ta.errors == tb.errors and ta.steps == tb.steps


def test_epoch_accounting(ring):
    t = simulate(ring, length=1001, seed=0)
    cfg = TrainConfig("sample_cloning", tau=0.0, batch_size=64, epochs=3, eval_every=1)
    _, trace = train(ring, t, TabularValues(np.zeros(32)), cfg, build_reference(ring))
    assert trace.steps[-1] == 3 * (1000 // 64)


@pytest.mark.parametrize("kind", ["sample_cloning", "bff_loss", "bff_gradient"])
def test_single_step_fidelity(kind, sde):
    t = simulate(sde, length=50, seed=2)
    approx = init_params("mlp", 5)
    first = make_batches(t, 1, True, seed=6, epoch=0)[0]
    batch = WindowBatch.from_trajectory(t.states, sde, first, needs_future=True)
    expect = approx.params - 0.1 * estimate_gradient(kind, approx, batch, sde).grad
    # a 3-state trajectory holds exactly one usable window
    m = int(first[0])
    short = Trajectory(t.states[m:m + 3], 0, "continuous")
    one, _ = train(sde, short, approx, TrainConfig(kind, tau=0.1, batch_size=1, seed=6))
    assert np.array_equal(one.params, expect)


@pytest.mark.parametrize("kind", [k for k in ALL if k is not Estimator.UNCORRELATED])
def test_tabular_fast_path_matches_generic_path(kind, ring):
    # the per-sample list loop and the minibatch path must take identical steps
    t = simulate(ring, length=400, seed=3)
    ref = build_reference(ring)
    cfg = TrainConfig(kind, tau=0.1, batch_size=1, epochs=2, seed=9, eval_every=25)
    fast, tf = train(ring, t, TabularValues(np.zeros(32)), cfg, ref)
    rec = _Recorder(ref, 25)
    rec(0, TabularValues(np.zeros(32)), force=True)
    dual = _default_dual(TabularValues(np.zeros(32)), cfg) if kind is Estimator.PRIMAL_DUAL else None
    slow, _ = _train_minibatch(ring, t, TabularValues(np.zeros(32)), cfg, rec, dual)
    assert np.allclose(fast.values, slow.values, rtol=0, atol=1e-12)


def test_uncorrelated_fast_path_uses_pre_drawn_states(ring):
    t = simulate(ring, length=300, seed=3)
    cfg = TrainConfig("uncorrelated", tau=0.1, batch_size=1, epochs=1, seed=9)
    fast, _ = train(ring, t, TabularValues(np.zeros(32)), cfg)
    perm = _perm_rng(9, 0).permutation(299)
    alt = jump(ring, t.states[perm], make_rng(9, "resample").random(perm.size))
    v = [0.0] * 32
    for m, ja in zip(perm.tolist(), alt.tolist()):
        s = TabularSample(int(t.states[m]), int(t.states[m + 1]), j_alt=ja)
        for k, g in sample_update("uncorrelated", s, v, ring.reward_vector, 0.9, 32).items():
            v[k] -= 0.1 * g
    assert np.array_equal(fast.values, v)


def test_divergence_guard(ring):
    t = simulate(ring, length=2000, seed=0)
    cfg = TrainConfig("sample_cloning", tau=50.0, batch_size=1, eval_every=1)
    with pytest.raises(DivergenceError, match="diverged") as info:
        train(ring, t, TabularValues(np.zeros(32)), cfg, build_reference(ring))
    assert isinstance(info.value.trace, ErrorTrace) and len(info.value.trace.steps) > 1


def test_model_free_refuses_oracle(ring):
    t = simulate(ring, length=100, seed=0)
    with pytest.raises(EstimatorError):
        train(ring, t, TabularValues(np.zeros(32)), TrainConfig("uncorrelated"), model_free=True)


def test_kind_mismatch(ring, sde):
    with pytest.raises(SpecError):
        train(ring, simulate(sde, length=10), TabularValues(np.zeros(32)), TrainConfig())


def test_eta_diagnostic_examples(sde, ring):
    with pytest.warns(BiasWarning, match="eps\\^2/eta = 100"):
        d = eta_diagnostic(TrainConfig(tau=0.1, batch_size=1000), sde)
    assert not d.ok and d.ratio == pytest.approx(100.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ok = eta_diagnostic(TrainConfig(tau=1.0, batch_size=10), sde)
        assert ok.ok and ok.ratio == pytest.approx(0.1)
        assert eta_diagnostic(TrainConfig(tau=0.1, batch_size=1000), ContinuousEnvSpec(epsilon=0.0)).ok
    with pytest.raises(SpecError):
        eta_diagnostic(TrainConfig(), ring)


def test_trace_and_profile_csv(tmp_path, ring):
    tr = ErrorTrace()
    for k, e in enumerate([4.0, 2.0, 1.0]):
        tr.record(10 * k, e)
    text = tr.to_csv(tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "step,error,rel_error" and text[-1] == "20,1.0,0.25"
    assert tr.relative_at(15) == 0.5
    ref = build_reference(ring)
    rows = value_profile_csv(tmp_path / "p.csv", TabularValues(ref.values), ref).read_text().splitlines()
    assert rows[0] == "s,v_approx,v_reference" and len(rows) == 33


def test_oracle_convergence_on_small_chain():
    # pilot-calibrated fixture: decaying steps 1/(1+k/2000)^0.6 and iterate
    # averaging over the second half reach 1e-2 relative error on this chain
    env = random_chain(np.random.default_rng(5), 4)
    vstar = exact_value(env)
    L = 400_000
    t = simulate(env, length=L + 1, seed=0).states
    alt = jump(env, t[:-1], make_rng(0, "resample").random(L + 1)).tolist()
    t = t.tolist()
    r = env.reward_vector.tolist()
    v, avg = [0.0] * 4, np.zeros(4)
    for m in range(L):
        lr = 1.0 / (1 + m / 2000) ** 0.6
        for k, g in sample_update("uncorrelated", TabularSample(t[m], t[m + 1], j_alt=alt[m]), v, r, 0.9, 4).items():
            v[k] -= lr * g
        if m >= L // 2:
            avg += v
    avg /= L - L // 2
    assert np.linalg.norm(avg - vstar) / np.linalg.norm(vstar) < 1e-2


def test_cached_reference_roundtrip(tmp_path, ring):
    env = ContinuousEnvSpec()
    kw = dict(length=3000, tau=0.01, batch_size=100, epochs=1, seed=1)
    a = cached_reference(env, tmp_path, **kw)
    assert len(list(tmp_path.glob("reference-*.npz"))) == 1
    b = cached_reference(env, tmp_path, **kw)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.grid, b.grid)
    direct = build_reference(env, **kw)
    assert np.array_equal(direct.values, a.values)
    assert cached_reference(ring, tmp_path).kind == "exact-tabular"


# -- Figure-4-style tabular runs (desk scale) --------------------------------

@pytest.fixture(scope="module")
def ring_runs():
    env = ring_chain()
    t = simulate(env, length=100_000, seed=0)
    ref = build_reference(env)
    out = {}
    for kind in ALL:
        cfg = TrainConfig(kind, tau=0.1, batch_size=1, epochs=5, seed=0, eval_every=1000)
        out[kind] = train(env, t, TabularValues(np.zeros(32)), cfg, ref)[1]
    return out


@pytest.mark.xfail(strict=True, reason="at 1e5 steps all estimators are still in the slow transient "
                   "(states with mu ~ 1e-4 barely move); see decisions ledger")
def test_cloning_worse_than_bff_loss(ring_runs):
    assert ring_runs[Estimator.SAMPLE_CLONING].final_relative > ring_runs[Estimator.BFF_LOSS].final_relative


@pytest.mark.xfail(strict=True, reason="oracle run plateaus near 0.25 relative error at desk scale; "
                   "slowest mode needs ~1e7 updates; see decisions ledger")
def test_uncorrelated_below_tenth(ring_runs):
    assert ring_runs[Estimator.UNCORRELATED].final_relative < 0.1


def test_tabular_primal_dual_below_fifth(ring_runs):
    assert ring_runs[Estimator.PRIMAL_DUAL].final_relative < 0.2


def test_all_ring_runs_make_progress(ring_runs):
    for trace in ring_runs.values():
        assert trace.final_relative < 0.5
        assert all(e >= 0 for e in trace.errors)


def test_continuous_reference_is_periodic(desk_reference):
    net = desk_reference.approx
    s = np.linspace(0.01, 2 * np.pi, 50)
    assert np.allclose(net.value(s), net.value(s + 2 * np.pi), rtol=0, atol=1e-10)
    assert np.array_equal(net.value(desk_reference.grid), desk_reference.values)


def test_continuous_reference_residual_probe(desk_reference, sde):
    net = desk_reference.approx
    grid = desk_reference.grid
    s = np.repeat(grid, 1000)
    nxt = resample_next(sde, s, make_rng(77, "resample"))
    f = sde.rewards(s) + 0.9 * net.value(nxt) - net.value(s)
    assert np.mean(np.abs(f.reshape(grid.size, 1000).mean(axis=1))) < 0.05
