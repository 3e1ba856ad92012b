import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msaplan.model import (
    DeviceClass,
    ModelError,
    OperationDomain,
    Workload,
    allocation_by_weight,
    brute_force_allocation,
    calibrate_popt,
    capacity_from_memory,
    classify_domain,
    feasibility,
    grid_points,
    solve_allocation,
    tmin_unconstrained,
    total_cost,
)

INF = math.inf


def fast_slow(cap=INF):
    return [DeviceClass("fast", 10.0, cap), DeviceClass("slow", 1.0)]


class TestWorkload:
    def test_total_cost_is_element_count(self):
        assert total_cost(Workload(36480)) == 36480
        assert total_cost(Workload(262144)) == 262144

    @pytest.mark.parametrize("bad", [0, -3, 2.5])
    def test_rejects_bad_element_counts(self, bad):
        with pytest.raises(ModelError):
            Workload(bad)

    @pytest.mark.parametrize(
        "e,n,pts", [(36480, 7, 12512640), (1, 1, 1), (262144, 7, 89915392), (2097152, 7, 719323136)]
    )
    def test_grid_points(self, e, n, pts):
        assert grid_points(Workload(e, n)) == pts


class TestDeviceClass:
    def test_capacity_from_memory_avoids_float_truncation(self):
        assert capacity_from_memory(32, 0.001) == 32000
        assert capacity_from_memory(40, 0.001) == 40000
        assert DeviceClass("v100", 1.0, mem_per_device=32).derive_capacity(0.001).c_max == 32000

    @pytest.mark.parametrize("kw", [dict(p_opt=0), dict(p_opt=1, c_max=0), dict(p_opt=1, count=0)])
    def test_validation(self, kw):
        with pytest.raises(ModelError):
            DeviceClass("x", **kw)

    def test_aggregates(self):
        c = DeviceClass("x", 3.0, 5.0, count=4)
        assert (c.aggregate_p, c.aggregate_cap) == (12.0, 20.0)


class TestTminUnconstrained:
    def test_examples(self):
        assert tmin_unconstrained(110, fast_slow()) == 10.0
        assert tmin_unconstrained(0, fast_slow()) == 0.0

    def test_closed_form_matches_uncapped_solver(self):
        u = 7.0
        classes = [DeviceClass("gpu", 100 * u, count=48), DeviceClass("core", u, count=1152)]
        expected = 2097152 / (5952 * u)
        assert tmin_unconstrained(2097152, classes) == pytest.approx(expected, rel=1e-15)
        assert solve_allocation(2097152, classes).t_min == pytest.approx(expected, rel=1e-12)


class TestSolveAllocation:
    def test_proportional_split(self):
        a = solve_allocation(110, fast_slow())
        assert a.per_class_cost == pytest.approx({"fast": 100, "slow": 10})
        assert a.t_min == pytest.approx(10)
        assert a.saturated == frozenset()

    def test_capacity_pins_fast_class(self):
        a = solve_allocation(110, fast_slow(cap=50))
        assert a.per_class_cost == pytest.approx({"fast": 50, "slow": 60})
        assert a.t_min == pytest.approx(60)
        assert a.saturated == {"fast"}

    def test_deep_rbc_24_plus_24(self):
        gpus = DeviceClass("v100", 100.0, 30000, count=24)
        cores = DeviceClass("core", 1.0, count=576)
        a = solve_allocation(2097152, [gpus, cores])
        assert a.per_class_cost["v100"] == 720000
        assert a.per_class_cost["core"] == pytest.approx(1377152)
        assert a.per_device_cost["core"] == pytest.approx(2390.888888888889)

    def test_infeasible_when_capacity_short(self):
        a = solve_allocation(100, [DeviceClass("a", 1.0, 40), DeviceClass("b", 1.0, 40)])
        assert not a.feasible and a.t_min == INF

    def test_exactly_full(self):
        a = solve_allocation(80, [DeviceClass("a", 1.0, 40), DeviceClass("b", 3.0, 40)])
        assert a.feasible and a.t_min == pytest.approx(40)

    def test_duplicate_names_rejected(self):
        with pytest.raises(ModelError):
            solve_allocation(1, [DeviceClass("a", 1.0), DeviceClass("a", 2.0)])

    def test_doubling_capped_class_is_superlinear(self):
        one = solve_allocation(110, [DeviceClass("fast", 10.0, 50), DeviceClass("slow", 1.0)])
        two = solve_allocation(110, [DeviceClass("fast", 10.0, 50, count=2), DeviceClass("slow", 1.0)])
        assert (one.t_min, two.t_min) == (60.0, 10.0)


classes_st = st.lists(
    st.tuples(
        st.floats(0.1, 100),
        st.one_of(st.just(INF), st.floats(1, 1000)),
        st.integers(1, 8),
    ),
    min_size=1,
    max_size=4,
)


@settings(max_examples=200, deadline=None)
@given(classes_st, st.floats(0, 5000))
def test_solver_properties(spec, cost):
    classes = [DeviceClass(f"c{i}", p, cap, count=n) for i, (p, cap, n) in enumerate(spec)]
    a = solve_allocation(cost, classes)
    total_cap = sum(c.aggregate_cap for c in classes)
    assert a.feasible == (cost <= total_cap)
    if not a.feasible:
        return
    assert sum(a.per_class_cost.values()) == pytest.approx(cost, rel=1e-9, abs=1e-9)
    for c in classes:
        share = a.per_class_cost[c.name]
        assert -1e-9 <= share <= c.aggregate_cap * (1 + 1e-9)
        # unsaturated classes all finish together at t_min
        if c.name not in a.saturated:
            assert share / c.aggregate_p == pytest.approx(a.t_min, rel=1e-9, abs=1e-12)
    assert a.t_min >= tmin_unconstrained(cost, classes) - 1e-12


@settings(max_examples=100, deadline=None)
@given(classes_st, st.floats(0.5, 4))
def test_more_devices_never_slower(spec, factor):
    classes = [DeviceClass(f"c{i}", p, cap, count=n) for i, (p, cap, n) in enumerate(spec)]
    cost = sum(c.aggregate_cap for c in classes if math.isfinite(c.c_max)) or 100.0
    cost = min(cost, 1000.0)
    base = solve_allocation(cost, classes)
    bigger = solve_allocation(cost, [classes[0].with_count(classes[0].count * 2)] + classes[1:])
    if base.feasible:
        assert bigger.t_min <= base.t_min * (1 + 1e-12)


class TestBruteForce:
    def test_matches_capped_example(self):
        a = brute_force_allocation(110, fast_slow(cap=50), grid_steps=1000)
        ref = solve_allocation(110, fast_slow(cap=50))
        assert abs(a.t_min - ref.t_min) / ref.t_min <= 1 / 1000 + 1e-12

    def test_zero_cost(self):
        a = brute_force_allocation(0, fast_slow())
        assert a.t_min == 0 and set(a.per_class_cost.values()) == {0.0}

    def test_single_class_takes_all(self):
        a = brute_force_allocation(30, [DeviceClass("only", 2.0, 40, count=3)])
        assert a.per_class_cost == {"only": 30.0}
        assert a.t_min == 5.0

    def test_guards(self):
        with pytest.raises(ModelError):
            brute_force_allocation(1, [DeviceClass(f"c{i}", 1.0) for i in range(5)])
        with pytest.raises(ModelError):
            brute_force_allocation(1, [DeviceClass(f"c{i}", 1.0) for i in range(4)], 5000, method="enumerate")

    @settings(max_examples=200, deadline=None)
    @given(classes_st, st.floats(0, 3000), st.integers(10, 60))
    def test_fold_equals_enumeration(self, spec, cost, steps):
        classes = [DeviceClass(f"c{i}", p, cap, count=n) for i, (p, cap, n) in enumerate(spec)]
        f = brute_force_allocation(cost, classes, steps, method="fold")
        e = brute_force_allocation(cost, classes, steps, method="enumerate")
        assert f.feasible == e.feasible
        if f.feasible:
            assert f.t_min == e.t_min
            assert max(f.per_class_cost[c.name] / c.aggregate_p for c in classes) == f.t_min


class TestFeasibility:
    def test_rbc_on_booster_only(self):
        f = feasibility(Workload(2097152), [DeviceClass("v100", 1.0, mem_per_device=32, count=48)])
        assert not f.feasible
        assert f.required_gb == pytest.approx(2097.152, abs=1e-9)
        assert f.available_gb == 1536

    def test_boundary_is_feasible(self):
        assert feasibility(Workload(1000), [DeviceClass("d", 1.0, mem_per_device=1)]).feasible

    def test_mix_is_feasible(self):
        f = feasibility(
            Workload(2097152),
            [DeviceClass("v100", 1.0, mem_per_device=32, count=48), DeviceClass("node", 1.0, mem_per_device=192, count=48)],
        )
        assert f.feasible and f.available_gb == 1536 + 9216


class TestClassifyDomain:
    def test_examples(self):
        assert classify_domain(2, 3, 10, 100) is OperationDomain.COMMUNICATION
        assert classify_domain(10, 1, 60, 100) is OperationDomain.EXTREME_SCALING
        assert classify_domain(10, 1, 10, 100) is OperationDomain.SCALING

    def test_juwels_threshold_is_half_of_40000(self):
        assert classify_domain(10, 1, 20000, 40000) is OperationDomain.EXTREME_SCALING
        assert classify_domain(10, 1, 19999, 40000) is OperationDomain.SCALING

    def test_equal_times_count_as_communication(self):
        assert classify_domain(1, 1, 1, 1) is OperationDomain.COMMUNICATION

    def test_labels(self):
        assert [str(d) for d in OperationDomain] == ["Communication", "Scaling", "ExtremeScaling"]


class TestCalibrate:
    def test_single_run(self):
        r = calibrate_popt([{"device_count": 4, "elements": 36480, "seconds_per_timestep": 0.1}])
        assert r == pytest.approx(91200)

    def test_best_run_wins(self):
        runs = [
            {"device_count": 2, "elements": 1000, "seconds_per_timestep": 1.0},
            {"device_count": 1, "elements": 1000, "seconds_per_timestep": 1.0},
        ]
        assert calibrate_popt(runs) == 1000

    def test_rejects_empty(self):
        with pytest.raises(ModelError):
            calibrate_popt([])


def test_allocation_by_weight_uses_real_performance_for_time():
    classes = [DeviceClass("gpu", 100.0, count=1), DeviceClass("core", 1.0, count=10)]
    a = allocation_by_weight(200, classes, {"gpu": 10, "core": 1})
    assert a.per_class_cost == pytest.approx({"gpu": 100, "core": 100})
    assert a.t_min == pytest.approx(10.0)
