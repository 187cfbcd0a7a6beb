import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discrete_inertia.errors import InitializationError, ModelError, ParameterError
from discrete_inertia.model import Load, Machine, SystemModel
from discrete_inertia.network import (Branch, Bus, FaultSpec, FrequencyEstimatorParams, apply_fault,
                                      build_ybus, bus_frequency_estimate, low_voltage_scale,
                                      network_injection, network_residual, power_flow_jacobian,
                                      solve_initial_power_flow, solve_power_flow)
from discrete_inertia.scenario import wscc9_builtin

# Modified WSCC operating point (bus-5 load 2.0 pu) from an fsolve-based
# rectangular-coordinate solver with its own dense admittance assembly.
WSCC_V = [1.04, 1.025, 1.025, 1.0212568557, 0.9823611146, 1.0096798043, 1.0224873982, 1.0133968994,
          1.0309402152]
WSCC_THETA = [0.0, 0.0799158686, 0.0147664398, -0.0802951534, -0.167991668, -0.1149681896, -0.0174422321,
              -0.063312575, -0.0323877352]


def two_bus(**kw):
    return [Bus(1), Bus(2)], [Branch(1, 2, 0.0, 0.1, **kw)]


class TestYbus:
    def test_single_branch(self):
        buses, branches = two_bus()
        y = build_ybus(buses, branches).toarray()
        np.testing.assert_allclose(y, [[-10j, 10j], [10j, -10j]], atol=1e-12)

    def test_line_charging_adds_to_diagonal(self):
        buses, branches = two_bus(b_half=0.05)
        y = build_ybus(buses, branches).toarray()
        np.testing.assert_allclose(np.diag(y), [-10j + 0.05j, -10j + 0.05j], atol=1e-12)
        np.testing.assert_allclose(y[0, 1], 10j, atol=1e-12)

    def test_open_branch_gives_zero_matrix(self):
        buses, branches = two_bus(status=False)
        assert build_ybus(buses, branches).nnz == 0 or not np.any(build_ybus(buses, branches).toarray())

    def test_dangling_branch_rejected(self):
        with pytest.raises(ModelError):
            build_ybus([Bus(1)], [Branch(1, 7, 0.0, 0.1)])

    def test_branch_validation(self):
        with pytest.raises(ParameterError):
            Branch(1, 2, 0.0, 0.0)
        with pytest.raises(ParameterError):
            Branch(1, 2, 0.0, 0.1, tap=0.0)

    def test_bus_shunt(self):
        y = build_ybus([Bus(1, shunt_g=0.2, shunt_b=-0.1)], []).toarray()
        assert y[0, 0] == complex(0.2, -0.1)

    def test_tap_breaks_symmetry(self):
        y = build_ybus([Bus(1), Bus(2)], [Branch(1, 2, 0.0, 0.1, tap=1.05)]).toarray()
        assert y[0, 0] != y[1, 1]
        np.testing.assert_allclose(y[0, 0], -10j / 1.05 ** 2)

    def test_wscc_symmetric(self):
        m = wscc9_builtin("SDD", 0).model
        y = build_ybus(m.buses, m.branches)
        assert abs(y - y.T).max() == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5),
                              st.floats(0.0, 0.1), st.floats(0.01, 1.0), st.floats(0.0, 0.2)),
                    min_size=1, max_size=12))
    def test_unit_taps_symmetric(self, spec):
        buses = [Bus(k) for k in range(6)]
        branches = [Branch(f, t, r, x, b) for f, t, r, x, b in spec if f != t]
        y = build_ybus(buses, branches).toarray()
        np.testing.assert_array_equal(y, y.T)


class TestFault:
    def setup_method(self):
        self.buses, self.branches = two_bus()
        self.y = build_ybus(self.buses, self.branches)

    def test_adds_conductance(self):
        yf = apply_fault(self.y, FaultSpec(2, 1e-3), self.buses)
        d = (yf - self.y).toarray()
        np.testing.assert_allclose(d, [[0, 0], [0, 1000.0]], atol=1e-9)
        # original untouched
        np.testing.assert_allclose(self.y.toarray(), [[-10j, 10j], [10j, -10j]])

    def test_twice_is_additive(self):
        f = FaultSpec(1, 0.01)
        y2 = apply_fault(apply_fault(self.y, f, self.buses), f, self.buses)
        assert y2[0, 0] == pytest.approx(self.y[0, 0] + 200.0)

    def test_rebuild_restores_bitwise(self):
        yf = apply_fault(self.y, FaultSpec(1, 1e-3), self.buses)
        assert yf[0, 0] != self.y[0, 0]
        again = build_ybus(self.buses, self.branches)
        assert (again != self.y).nnz == 0

    def test_bad_resistance(self):
        with pytest.raises(ParameterError):
            FaultSpec(1, 0.0)
        with pytest.raises(ParameterError):
            FaultSpec(1, -1.0)
        with pytest.raises(ParameterError):
            apply_fault(self.y, FaultSpec(1, math.inf), self.buses)

    def test_unknown_bus(self):
        with pytest.raises(ModelError):
            apply_fault(self.y, FaultSpec(9, 0.1), self.buses)

    def test_clear_before_apply_rejected(self):
        with pytest.raises(ParameterError):
            FaultSpec(1, 0.1, t_apply=2.0, t_clear=1.0)


class TestResidual:
    def test_isolated_bus(self):
        y = build_ybus([Bus(1)], [])
        np.testing.assert_array_equal(network_residual([1.0], [0.0], y, [0.0], [0.0]), [0.0, 0.0])

    def test_lossless_line_flow(self):
        buses, branches = two_bus()
        y = build_ybus(buses, branches)
        p1 = math.sin(0.1) / 0.1
        r = network_residual([1.0, 1.0], [0.1, 0.0], y, [p1, -p1], [0.0, 0.0])
        assert abs(r[0]) < 1e-12
        assert abs(r[1]) < 1e-12

    def test_jacobian_matches_finite_differences(self):
        m = wscc9_builtin("SDD", 0).model
        y = build_ybus(m.buses, m.branches)
        v = np.array(WSCC_V)
        th = np.array(WSCC_THETA)
        dPt, dPv, dQt, dQv = power_flow_jacobian(v, th, y)
        eps = 1e-7
        for k in (0, 4, 8):
            e = np.zeros(9)
            e[k] = eps
            p1, q1 = network_injection(v, th + e, y)
            p0, q0 = network_injection(v, th - e, y)
            np.testing.assert_allclose((p1 - p0) / (2 * eps), dPt[:, k], atol=1e-6)
            np.testing.assert_allclose((q1 - q0) / (2 * eps), dQt[:, k], atol=1e-6)
            p1, q1 = network_injection(v + e, th, y)
            p0, q0 = network_injection(v - e, th, y)
            np.testing.assert_allclose((p1 - p0) / (2 * eps), dPv[:, k], atol=1e-6)
            np.testing.assert_allclose((q1 - q0) / (2 * eps), dQv[:, k], atol=1e-6)


class TestPowerFlow:
    def test_two_bus_closed_form(self):
        buses, branches = two_bus()
        y = build_ybus(buses, branches)
        pf = solve_power_flow(buses, y, [0.0, -0.5], [0.0, 0.0], slack=1, v_set={1: 1.0})
        # P = v1 v2 sin(th1 - th2)/x with reactive balance at bus 2
        assert pf.mismatch <= 1e-8
        p_flow = pf.v[0] * pf.v[1] * math.sin(pf.theta[0] - pf.theta[1]) / 0.1
        assert p_flow == pytest.approx(0.5, abs=1e-8)

    def test_two_bus_pv_closed_form(self):
        buses, branches = two_bus()
        y = build_ybus(buses, branches)
        pf = solve_power_flow(buses, y, [0.0, -0.5], [0.0, 0.0], slack=1, pv=[2], v_set={1: 1.0, 2: 1.0})
        assert pf.theta[1] == pytest.approx(-math.asin(0.05), abs=1e-9)
        assert pf.theta[1] == pytest.approx(-0.05002, abs=1e-5)

    def test_zero_load_flat(self):
        buses, branches = two_bus()
        y = build_ybus(buses, branches)
        pf = solve_power_flow(buses, y, [0.0, 0.0], [0.0, 0.0], slack=1, v_set={1: 1.0})
        np.testing.assert_allclose(pf.v, 1.0)
        np.testing.assert_allclose(pf.theta, 0.0)
        assert pf.iterations == 0

    def test_wscc_matches_oracle(self):
        pf = solve_initial_power_flow(wscc9_builtin("SDD", 0).model)
        np.testing.assert_allclose(pf.v, WSCC_V, atol=1e-6)
        np.testing.assert_allclose(pf.theta, WSCC_THETA, atol=1e-6)

    def test_wscc_residual_at_solution(self):
        m = wscc9_builtin("SDD", 0).model
        pf = solve_initial_power_flow(m)
        y = build_ybus(m.buses, m.branches)
        r = network_residual(pf.v, pf.theta, y, pf.p_net, pf.q_net)
        assert np.max(np.abs(r)) < 1e-8
        # net injections: machines minus loads at every bus
        load_p = np.zeros(9)
        for ld in m.loads:
            load_p[ld.bus - 1] += ld.p
        assert pf.p_net[1] == pytest.approx(1.63, abs=1e-8)
        assert pf.p_net[4] == pytest.approx(-2.0, abs=1e-8)
        losses = pf.p_net.sum()
        assert 0.0 < losses < 0.1

    def test_nonconvergence_reports_mismatch(self):
        buses, branches = two_bus()
        y = build_ybus(buses, branches)
        with pytest.raises(InitializationError, match="mismatch"):
            solve_power_flow(buses, y, [0.0, -50.0], [0.0, 0.0], slack=1, v_set={1: 1.0}, max_iter=10)

    def test_missing_slack(self):
        m = SystemModel([Bus(1), Bus(2)], [Branch(1, 2, 0.0, 0.1)],
                        machines=[Machine(1, 1, 0.0, 1.0, slack=False)], loads=[Load(1, 2, 0.1)])
        with pytest.raises(ModelError):
            solve_initial_power_flow(m)


class TestFrequencyEstimate:
    def test_constant_angle(self):
        w = bus_frequency_estimate(np.full(100, 0.3), FrequencyEstimatorParams(dt=0.01))
        np.testing.assert_allclose(w, 1.0)

    def test_ramp(self):
        dt = 0.01
        t = np.arange(0, 2.0, dt)
        w = bus_frequency_estimate(2 * math.pi * 0.06 * t, FrequencyEstimatorParams(dt=dt))
        assert w[-1] == pytest.approx(1.001, abs=1e-9)

    def test_step_decays_with_filter_constant(self):
        dt, tf = 0.001, 0.05
        th = np.r_[0.0, np.full(400, 0.01)]
        w = bus_frequency_estimate(th, FrequencyEstimatorParams(dt=dt, t_f=tf))
        dev = w - 1.0
        k = int(round(tf / dt))
        assert dev[1 + k] / dev[1] == pytest.approx(math.exp(-1.0), rel=0.02)
        assert abs(dev[-1]) < 1e-3 * dev[1]

    def test_parameter_checks(self):
        with pytest.raises(ParameterError):
            FrequencyEstimatorParams(dt=0.01, t_f=0.0)
        with pytest.raises(ParameterError):
            FrequencyEstimatorParams(dt=0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-0.05, 0.05), min_size=2, max_size=200), st.floats(0.001, 0.05))
    def test_bounded_by_max_slope(self, steps, dt):
        th = np.cumsum(steps)
        prm = FrequencyEstimatorParams(dt=dt)
        w = bus_frequency_estimate(th, prm)
        delta = np.max(np.abs(np.diff(th))) / dt / prm.omega_s
        assert np.all(np.abs(w - 1.0) <= delta * (1 + 1e-9) + 1e-15)


def test_low_voltage_scale():
    np.testing.assert_allclose(low_voltage_scale([1.0, 0.7, 0.35, 0.0], 0.7), [1.0, 1.0, 0.25, 0.0])
