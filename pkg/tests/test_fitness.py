import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import single_tank_model
from pumpopt import fitness as ft
from pumpopt import simulator
from pumpopt.network import ConfigError, Schedule, model_from_dict
from pumpopt.simulator import Trajectory


def _flat_schedule(n_rows, m):
    return Schedule(np.zeros((n_rows, m)), np.zeros((0, m)), [])


def test_objective_all_off_is_zero(toy):
    traj = simulator.simulate_eps(toy, Schedule(np.zeros((3, 24)), np.zeros((0, 24)), []))
    assert ft.objective(traj, toy) == 0.0


def test_objective_hand_example():
    model = single_tank_model(m=2, tariff=[1.0, 0.5])
    traj = Trajectory(np.ones((3, 1)), np.array([8.0, 4.0]), _flat_schedule(1, 2))
    assert ft.objective(traj, model) == pytest.approx(0.5, abs=1e-15)


def test_objective_upper_bound():
    model = single_tank_model(m=3)
    traj = Trajectory(np.ones((4, 1)), np.full(3, 10.0), Schedule(np.ones((1, 3)), np.zeros((0, 3)), []))
    assert ft.objective(traj, model) == 1.0


def test_objective_matches_hand_cost(toy, toy_dict, rng):
    free = toy.for_mode("schedule_and_storage")
    for _ in range(5):
        s = Schedule.random(free, rng)
        traj = simulator.simulate_eps(free, s)
        _, power = oracles.run(toy_dict, s.statuses.tolist(), list(traj.levels[0]))
        assert ft.objective(traj, free) == pytest.approx(oracles.cost(toy_dict, power), abs=1e-12)


def test_objective_rejects_wrong_length():
    model = single_tank_model(m=3)
    with pytest.raises(ConfigError):
        ft.objective(Trajectory(np.ones((3, 1)), np.zeros(3), _flat_schedule(1, 3)), model)


def test_bracket():
    assert ft.bracket(-0.3) == 0.0
    assert ft.bracket(0.0) == 0.0
    assert ft.bracket(0.05) == 0.05


@pytest.mark.parametrize("row, n", [([1, 1, 0, 0, 1, 1], 2), ([1] * 6, 0), ([0, 1, 0, 1], 3),
                                    ([0.3, 0.0, 0.8], 2), ([0.0], 0)])
def test_count_switches(row, n):
    assert ft.count_switches(row) == n


def _one_tank(m=4, **tank):
    model = single_tank_model(m=m, **tank)
    return model, ft.ConstraintSet.unconstrained(model)


def test_bound_violation_hand_value():
    model, cs = _one_tank()
    cs.lower[0] = 0.30
    traj = Trajectory(np.full((5, 1), 1.0), np.zeros(4), _flat_schedule(1, 4))   # 1.0 m of 4.0 = 0.25
    g, per = ft.violation(traj, traj.schedule, cs)
    assert g == pytest.approx(0.05, abs=1e-15)
    assert per == {"bounds:T1": pytest.approx(0.05, abs=1e-15)}


def test_bound_sum_skips_the_final_state():
    model, cs = _one_tank()
    cs.upper[0] = 0.5
    levels = np.array([[1.0], [1.0], [1.0], [1.0], [3.9]])
    traj = Trajectory(levels, np.zeros(4), _flat_schedule(1, 4))
    assert ft.violation(traj, traj.schedule, cs)[0] == 0.0


def test_switch_violation_hand_value():
    model, cs = _one_tank(m=7)
    cs.switch_limits[0] = 4
    s = Schedule(np.array([[1.0, 0, 1, 0, 1, 0, 1]]), np.zeros((0, 7)), [])
    traj = Trajectory(np.full((8, 1), 2.0), np.zeros(7), s)
    g, per = ft.violation(traj, s, cs)
    assert g == 2.0 and per == {"switches:P1": 2.0}


def test_periodicity_reads_the_absolute_drift():
    model, cs = _one_tank(m=2)
    cs.periodicity[0] = 0.05
    for end in (2.0 - 0.4, 2.0 + 0.4):                # +-0.1 normalized
        traj = Trajectory(np.array([[2.0], [2.0], [end]]), np.zeros(2), _flat_schedule(1, 2))
        assert ft.violation(traj, traj.schedule, cs)[0] == pytest.approx(0.05, abs=1e-12)


def test_feasible_trajectory_has_zero_violation(toy):
    cs = ft.ConstraintSet.from_model(toy)
    levels = np.tile(toy.denormalize_levels(np.full(3, 0.6)), (25, 1))
    traj = Trajectory(levels, np.zeros(24), Schedule(np.zeros((3, 24)), np.zeros((0, 24)), []))
    report = ft.evaluate(traj, toy, cs, 1000.0)
    assert report.violation == 0.0 and report.feasible
    assert report.penalized == report.objective == 0.0
    assert all(v == 0.0 for v in report.per_constraint.values())


def test_violation_matches_hand_oracle(toy, toy_dict, rng):
    free = toy.for_mode("schedule_and_storage")
    cs = ft.ConstraintSet.from_model(free)
    for _ in range(20):
        s = Schedule.random(free, rng)
        traj = simulator.simulate_eps(free, s)
        expected = oracles.violation(toy_dict, traj.levels.tolist(), s.statuses.tolist())
        assert ft.violation(traj, s, cs)[0] == pytest.approx(expected, abs=1e-12)


def test_penalized_fitness_reported_values():
    assert ft.penalized_fitness(0.4199, 0.0, 1000.0) == 0.4199
    assert ft.penalized_fitness(0.4687, 0.1966, 1000.0) == pytest.approx(197.0687, abs=1e-9)
    assert ft.penalized_fitness(0.3, 0.0, 50.0) == 0.3


def test_report_identity(toy, rng):
    free = toy.for_mode("schedule_and_storage")
    fn = ft.fitness_function(free, ft.SimulatorBackend(free), ft.ConstraintSet.from_model(free), 1000.0)
    for r in fn([Schedule.random(free, rng) for _ in range(30)]):
        assert r.penalized == r.objective + 1000.0 * r.violation
        assert r.violation >= 0.0
        assert (r.violation == 0.0) == all(v == 0.0 for v in r.per_constraint.values())
        assert set(r.switches) == {"P1", "P2", "P3"}


def test_penalty_factor_must_be_positive(toy):
    with pytest.raises(ConfigError):
        ft.fitness_function(toy, ft.SimulatorBackend(toy), ft.ConstraintSet.from_model(toy), 0.0)


@settings(max_examples=200)
@given(f_feasible=st.floats(0.0, 1.0), f_other=st.floats(0.0, 1.0), g=st.floats(0.01, 10.0),
       penalty=st.floats(100.0, 1e4))
def test_feasible_dominance(f_feasible, f_other, g, penalty):
    worse = ft.penalized_fitness(f_other, g, penalty)
    best = ft.penalized_fitness(f_feasible, 0.0, penalty)
    # penalty * g == 1 with f_other == 0 and f_feasible == 1 is an exact tie
    assert worse >= best
    if penalty * g > 1.0 or f_other > 0.0 or f_feasible < 1.0:
        assert worse > best


def test_dominance_boundary_is_a_tie():
    assert ft.penalized_fitness(0.0, 0.01, 100.0) == ft.penalized_fitness(1.0, 0.0, 100.0)


@settings(max_examples=200)
@given(f=st.floats(0.0, 1.0), g1=st.floats(0.0, 5.0), step=st.floats(1e-9, 5.0))
def test_penalized_is_increasing_in_violation(f, g1, step):
    # steps below float resolution at this magnitude cannot be told apart
    assert ft.penalized_fitness(f, g1, 1000.0) < ft.penalized_fitness(f, g1 + step, 1000.0)


@settings(max_examples=200)
@given(row=st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=1, max_size=30),
       factor=st.floats(1e-6, 1.0))
def test_switch_count_ignores_scaling(row, factor):
    assert ft.count_switches(np.array(row) * factor) == ft.count_switches(row)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), perm=st.permutations([0, 1, 2]))
def test_violation_is_permutation_covariant(seed, perm):
    rng = np.random.default_rng(seed)
    m = 6
    cs = ft.ConstraintSet(["A", "B", "C"], np.array([[0.0, 1.0]] * 3),
                          rng.uniform(0.0, 0.4, (3, m)), rng.uniform(0.6, 1.0, (3, m)),
                          rng.uniform(0.0, 0.1, 3), ["P"], np.array([1.0]))
    levels = rng.random((1, m + 1, 3))
    statuses = rng.integers(0, 2, (1, 1, m)).astype(float)
    labels, items, _ = ft.violation_terms(levels, statuses, cs)
    p = list(perm)
    moved = ft.ConstraintSet([cs.variables[i] for i in p], cs.ranges[p], cs.lower[p], cs.upper[p],
                             cs.periodicity[p], ["P"], np.array([1.0]))
    labels2, items2, _ = ft.violation_terms(levels[:, :, p], statuses, moved)
    assert dict(zip(labels, items[0])) == dict(zip(labels2, items2[0]))
    assert items.sum() == pytest.approx(items2.sum(), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_zero_violation_iff_every_item_is_zero(seed):
    rng = np.random.default_rng(seed)
    m = 4
    cs = ft.ConstraintSet(["A", "B"], np.array([[0.0, 1.0]] * 2), np.full((2, m), 0.2), np.full((2, m), 0.8),
                          np.array([0.1, np.nan]), ["P"], np.array([2.0]))
    levels = rng.uniform(0.1, 0.9, (1, m + 1, 2))
    statuses = rng.integers(0, 2, (1, 1, m)).astype(float)
    _, items, _ = ft.violation_terms(levels, statuses, cs)
    assert (items.sum() == 0.0) == bool(np.all(items == 0.0))
    assert np.all(items >= 0.0)


def test_constraints_from_toy(toy):
    cs = ft.ConstraintSet.from_model(toy)
    assert cs.variables == ["T1", "T2", "T3"]
    np.testing.assert_array_equal(cs.lower, 0.3)
    np.testing.assert_array_equal(cs.upper, 0.95)
    np.testing.assert_allclose(cs.periodicity, [0.02, 0.02, 0.1 / 4.5])
    np.testing.assert_array_equal(cs.switch_limits, [4, 4, 4])


def test_morning_window_raises_the_lower_bound():
    model = model_from_dict({
        "tanks": [{"id": "T1", "area": 100.0, "level_min": 0.0, "level_max": 4.0,
                   "morning_min": {"fraction": 0.7, "start_hour": 6, "end_hour": 9}}],
        "pumps": [{"id": "P1", "rated_power": 10.0, "rated_flow": 50.0, "target_tank": "T1"}],
        "demand_zones": [],
        "tariff_pattern": [1.0] * 12,
        "horizon": {"t0": 0, "m": 12, "dt": 1.0},
    })
    cs = ft.ConstraintSet.from_model(model)
    assert cs.lower[0].tolist() == [0.0] * 6 + [0.7] * 3 + [0.0] * 3


def test_constraints_dict_round_trip(toy, tmp_path):
    cs = ft.ConstraintSet.from_model(toy)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cs.to_dict()))
    back = ft.load_constraints(toy, path)
    for name in ("lower", "upper", "periodicity", "switch_limits"):
        np.testing.assert_array_equal(getattr(back, name), getattr(cs, name))


def test_bundled_constraints_match_the_model(toy):
    from pumpopt.network import bundled_path
    back = ft.load_constraints(toy, bundled_path("toy_constraints.json"))
    cs = ft.ConstraintSet.from_model(toy)
    np.testing.assert_array_equal(back.lower, cs.lower)
    np.testing.assert_allclose(back.periodicity, cs.periodicity, rtol=0, atol=1e-15)


@pytest.mark.parametrize("data, needle", [
    ({"windows": {}}, "windows"),
    ({"periodicity": {"T9": 0.1}}, "T9"),
    ({"switch_limits": {"P7": 3}}, "P7"),
    ({"time_bounds": {"T1": {"lower": [0.1, 0.2]}}}, "24 values"),
    ({"time_bounds": {"T1": {"lower": 0.9, "upper": 0.2}}}, "exceeds"),
    ({"periodicity": {"T1": -0.1}}, ">= 0"),
])
def test_constraint_errors(toy, data, needle):
    with pytest.raises(ConfigError, match=needle):
        ft.ConstraintSet.from_dict(toy, data)


def test_malformed_constraints_file(toy, tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{\n oops")
    with pytest.raises(ConfigError, match="line 2"):
        ft.load_constraints(toy, path)


def test_tightened(toy):
    cs = ft.ConstraintSet.from_model(toy)
    tight = cs.tightened(0.01)
    np.testing.assert_allclose(tight.lower, 0.31)
    np.testing.assert_allclose(tight.upper, 0.94)
    np.testing.assert_allclose(tight.periodicity, cs.periodicity - 0.01)
    np.testing.assert_array_equal(tight.switch_limits, cs.switch_limits)
    np.testing.assert_array_equal(cs.lower, 0.3)          # original untouched
    same = cs.tightened(0.0)
    np.testing.assert_array_equal(same.lower, cs.lower)
    huge = cs.tightened(1.0)
    np.testing.assert_allclose(huge.lower, 0.625)
    np.testing.assert_array_equal(huge.lower, huge.upper)
    np.testing.assert_array_equal(huge.periodicity, 0.0)
    with pytest.raises(ConfigError):
        cs.tightened(-0.1)


def test_tightened_keeps_missing_constraints_missing():
    model, cs = _one_tank()
    tight = cs.tightened(0.1)
    assert np.all(np.isneginf(tight.lower)) and np.all(np.isposinf(tight.upper))
    assert np.isnan(tight.periodicity[0]) and np.isnan(tight.switch_limits[0])


def test_backends_agree_on_ground_truth(toy, rng):
    free = toy.for_mode("schedule_and_storage")
    cs = ft.ConstraintSet.from_model(free)
    fn = ft.fitness_function(free, ft.SimulatorBackend(free), cs, 1000.0)
    schedules = [Schedule.random(free, rng) for _ in range(8)]
    for s, r in zip(schedules, fn(schedules)):
        direct = ft.evaluate(simulator.simulate_eps(free, s), free, cs, 1000.0)
        assert r.to_dict() == direct.to_dict()


def test_metamodel_backend_close_to_simulator(toy, toy_meta, rng):
    free = toy.for_mode("schedule_and_storage")
    cs = ft.ConstraintSet.from_model(free)
    sim = ft.fitness_function(free, ft.SimulatorBackend(free), cs, 1000.0)
    meta = ft.fitness_function(free, ft.MetaModelBackend(free, toy_meta), cs, 1000.0)
    schedules = [Schedule.random(free, rng) for _ in range(10)]
    for a, b in zip(sim(schedules), meta(schedules)):
        assert abs(a.objective - b.objective) < 0.02
        assert a.switches == b.switches


def test_backend_trajectory(toy):
    s = Schedule(np.ones((3, 24)), np.zeros((0, 24)), [])
    traj = ft.trajectory_from_backend(toy, ft.SimulatorBackend(toy), s)
    ref = simulator.simulate_eps(toy, s)
    np.testing.assert_allclose(traj.levels, ref.levels, atol=1e-12)
    assert traj.source == "simulator"
