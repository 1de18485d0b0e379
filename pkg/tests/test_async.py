import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from online_adp.async_algos import (
    AsyncSchedule,
    Partition,
    VQPair,
    alternating_pi_schedule,
    f_mapping,
    g_mapping,
    mf_mapping,
    random_vi_schedule,
    round_robin_schedule,
    run_async_online_pi,
    run_async_online_vi,
    validate_schedule,
    vq_norm,
)
from online_adp.core import ContractViolation, StateSpace
from online_adp.models import StageSequence, m2_kernel, random_mdp, static_sequence
from online_adp.oracle import solve_all
from online_adp.sync_algos import ErrorInjector, PowerSchedule, run_approx_online_vi

from scenarios import r5_kernel, sinusoidal


def test_partition():
    p = Partition.contiguous(5, 2)
    assert p.assignment == (0, 0, 0, 1, 1)
    np.testing.assert_array_equal(p.block(1), [3, 4])
    with pytest.raises(ContractViolation):
        Partition((0, 2), 2)
    with pytest.raises(ContractViolation):
        Partition((0, 0), 2)


def test_builtin_schedules_validate():
    K = 120
    for sched in (round_robin_schedule(3, K), random_vi_schedule(2, K, 3, 2, seed=4),
                  alternating_pi_schedule(2, K, 4), alternating_pi_schedule(3, K, 5, seed=1)):
        assert validate_schedule(sched, K) == []
    with pytest.raises(ContractViolation):
        alternating_pi_schedule(2, K, 1)


def test_random_schedule_delays_bounded():
    sched = random_vi_schedule(3, 200, 4, 3, seed=8)
    lag = np.arange(200)[:, None, None] - sched.delays
    assert lag.min() >= 0 and lag.max() <= 3
    assert lag.max() > 0


def test_window_violation_names_processor_and_time():
    sched = AsyncSchedule((frozenset({0, 1, 2, 9}), frozenset(range(10))), T_a=3)
    report = validate_schedule(sched, 10)
    assert report and {v.kind for v in report} == {"window"}
    assert all(v.where[0] == 0 for v in report)
    assert (0, 3) in [v.where for v in report]


def test_overlap_and_delay_violations():
    sched = AsyncSchedule((frozenset(range(0, 10, 2)),), T_a=2, evaluate_sets=(frozenset(range(0, 10, 3)),))
    kinds = {v.kind for v in validate_schedule(sched, 10)}
    assert "overlap" in kinds
    delays = np.zeros((5, 1, 1), dtype=int)
    sched = AsyncSchedule((frozenset(range(5)),), T_a=1, T_d=1, delays=delays)
    bad = [v for v in validate_schedule(sched, 5) if v.kind == "delay"]
    # reading iterate 0 at k = 2, 3, 4 exceeds T_d = 1
    assert [v.where for v in bad] == [(0, 0, 2), (0, 0, 3), (0, 0, 4)]
    with pytest.raises(ContractViolation):
        run_async_online_vi(static_sequence(*m2_kernel(), 5), np.zeros(2), Partition((0, 0), 1), sched,
                            PowerSchedule((1,)), ErrorInjector.zero())


def test_schedule_round_trip():
    sched = random_vi_schedule(2, 30, 3, 1, seed=2)
    back = AsyncSchedule.from_dict(sched.to_dict())
    assert back.improve_sets == sched.improve_sets and np.array_equal(back.delays, sched.delays)


def test_async_vi_requires_unit_weights():
    kernel, cost = m2_kernel()
    seq = StageSequence(kernel, [cost] * 4, weights=[1.0, 1.05])
    with pytest.raises(ContractViolation):
        run_async_online_vi(seq, np.zeros(2), Partition((0, 0), 1), round_robin_schedule(1, 4),
                            PowerSchedule((1,)), ErrorInjector.zero())


def test_single_processor_matches_sync(r5_drift):
    oracle = solve_all(r5_drift)
    powers = PowerSchedule.cycling([1, 2, 3], 200)
    inj = ErrorInjector(0.02, seed=5)
    a = run_approx_online_vi(r5_drift, np.zeros(5), powers, inj, oracle)
    b = run_async_online_vi(r5_drift, np.zeros(5), Partition.contiguous(5, 1), round_robin_schedule(1, 200),
                            powers, inj, oracle)
    assert a.errors == b.errors
    assert all(np.array_equal(x, y) for x, y in zip(a.iterates, b.iterates))


def test_async_vi_static_converges():
    seq = static_sequence(*m2_kernel(), 400)
    sched = random_vi_schedule(2, 400, 3, 2, seed=1)
    traj = run_async_online_vi(seq, np.zeros(2), Partition.contiguous(2, 2), sched,
                               PowerSchedule.cycling([1, 2, 3], 400), ErrorInjector.zero())
    assert traj.errors[-1] <= 1e-6
    assert traj.bound_kind == "asymptotic-tail"


def test_async_vi_only_active_blocks_change(m2_drift):
    sched = round_robin_schedule(2, 60)
    traj = run_async_online_vi(m2_drift, np.zeros(2), Partition.contiguous(2, 2), sched,
                               PowerSchedule((1,)), ErrorInjector.zero())
    for k in range(59):
        moved = np.flatnonzero(traj.iterates[k + 1] != traj.iterates[k])
        assert set(moved) <= {k % 2}


@pytest.mark.parametrize("mode", ["full", "reduced"])
def test_async_pi_static_improves(mode):
    seq = static_sequence(*m2_kernel(), 200)
    sched = alternating_pi_schedule(2, 200, 2)
    traj = run_async_online_pi(seq, np.zeros(2), np.zeros((2, 2)), np.array([0, 0]), Partition.contiguous(2, 2),
                               sched, mode)
    assert traj.errors[-1] < 1e-4 * traj.errors[0]


def test_async_pi_mode_checked(m2):
    with pytest.raises(ContractViolation):
        run_async_online_pi(m2, np.zeros(2), np.zeros((2, 2)), np.array([0, 0]), Partition.contiguous(2, 1),
                            alternating_pi_schedule(1, 4, 2), "bogus")
    with pytest.raises(ContractViolation):
        run_async_online_pi(m2, np.zeros(2), np.zeros((2, 2)), np.array([0, 0]), Partition.contiguous(2, 1),
                            round_robin_schedule(1, 4))


# ---------------------------------------------------------------------------
# the (V, Q) mappings

def _models():
    yield static_sequence(*m2_kernel(), 1)
    yield static_sequence(*random_mdp(4, 3, 11, sparse_feasible=True), 1)
    yield sinusoidal(r5_kernel(), 3)


@pytest.mark.parametrize("model", list(_models()), ids=["m2", "sparse4", "r5"])
def test_uniform_fixed_point(model, rng):
    oracle = solve_all(model)
    for k in range(model.horizon):
        star = VQPair(oracle.J_star[k], oracle.Q_star[k])
        for _ in range(100):
            mu = np.array([rng.choice(model.feasible_actions(x)) for x in range(model.n_states)])
            out = g_mapping(model, k, mu, star)
            assert vq_norm(out - star, model.space) <= 1e-9
        V, pol = mf_mapping(model, k, oracle.mu_star[k], star.V, star.Q)
        np.testing.assert_allclose(V, oracle.J_star[k], atol=1e-9)
        np.testing.assert_allclose(V, f_mapping(model, k, mu, star.V, star.Q)[np.arange(model.n_states), pol])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_g_contraction(seed):
    model = static_sequence(*random_mdp(4, 3, 11, sparse_feasible=True), 1)
    rng = np.random.default_rng(seed)
    n, A = model.n_states, model.n_actions
    mu = np.array([rng.choice(model.feasible_actions(x)) for x in range(n)])
    a = VQPair(rng.normal(scale=10, size=n), np.where(model.feasible, rng.normal(scale=10, size=(n, A)), np.inf))
    b = VQPair(rng.normal(scale=10, size=n), np.where(model.feasible, rng.normal(scale=10, size=(n, A)), np.inf))
    lhs = vq_norm(g_mapping(model, 0, mu, a) - g_mapping(model, 0, mu, b), model.space)
    assert lhs <= model.alpha * vq_norm(a - b, model.space) + 1e-12


def test_vq_norm_ignores_infeasible():
    sp = StateSpace(2)
    pair = VQPair(np.array([1.0, -2.0]), np.array([[0.5, np.inf], [3.0, -1.0]]))
    assert vq_norm(pair, sp) == 3.0
    with pytest.raises(ContractViolation):
        vq_norm(VQPair(np.zeros(2), np.zeros(3)), sp)
