import math

import numpy as np
import pytest

from discrete_inertia import integrator
from discrete_inertia.errors import ParameterError, ScenarioError, StepFailure
from discrete_inertia.fleet import build_fleet
from discrete_inertia.integrator import (Event, FunctionDAE, GridDAE, StepControl, Stepper, SystemState,
                                        process_events, simulate, step)
from discrete_inertia.scenario import wscc9_builtin


def run_trapezoid(system, x0, y0, h, t_end):
    st = Stepper(system, StepControl(h_step=h, tick=h, newton_tol=1e-13))
    x, y, f = np.array(x0, float), np.array(y0, float), None
    for k in range(int(round(t_end / h))):
        x, y, f = st.step(x, y, h, k * h, f)
    return x, y


def order_slope(errors, hs):
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


class TestTrapezoid:
    def test_scalar_decay_closed_form(self):
        sys = FunctionDAE(lambda x, y: -x, None, nx=1)
        s1 = step(SystemState(0.0, np.array([1.0]), np.zeros(0)), sys, StepControl(h_step=0.1, tick=0.1,
                                                                                    newton_tol=1e-14))
        assert abs(s1.x[0] - 0.95 / 1.05) <= 1e-12
        assert s1.t == pytest.approx(0.1)

    def test_fixed_point(self):
        sys = FunctionDAE(lambda x, y: np.zeros_like(x), lambda x, y: y - 2.0 * x[:1], nx=2, ny=1)
        x, y = run_trapezoid(sys, [0.3, -0.1], [0.6], 0.05, 1.0)
        np.testing.assert_allclose(x, [0.3, -0.1], atol=1e-12)
        np.testing.assert_allclose(y, [0.6], atol=1e-12)

    def test_order_linear_oscillator(self):
        # x'' = -x as a DAE: velocity is algebraic-free, energy tracked over one period
        sys = FunctionDAE(lambda x, y: np.vstack([x[1:2], -x[0:1]]), None, nx=2)
        hs = 2 * math.pi / np.array([40, 80, 160, 320])
        err = []
        for h in hs:
            x, _ = run_trapezoid(sys, [1.0, 0.0], [], h, 2 * math.pi)
            err.append(np.hypot(x[0] - 1.0, x[1]))
        assert order_slope(err, hs) == pytest.approx(2.0, abs=0.1)

    def test_order_nonlinear_dae(self):
        # x' = -y*x, 0 = y - (1 + x^2)  ->  x(t) = x0 / sqrt((1 + x0^2) e^{2t} - x0^2)
        sys = FunctionDAE(lambda x, y: -y * x, lambda x, y: y - (1.0 + x ** 2), nx=1, ny=1)
        x0, T = 0.8, 1.0
        exact = x0 / math.sqrt((1 + x0 ** 2) * math.exp(2 * T) - x0 ** 2)
        hs = np.array([0.1, 0.05, 0.025, 0.0125])
        err = [abs(run_trapezoid(sys, [x0], [1 + x0 ** 2], h, T)[0][0] - exact) for h in hs]
        assert order_slope(err, hs) == pytest.approx(2.0, abs=0.1)

    def test_pendulum_energy_drift_quarters(self):
        # nonlinear pendulum: worst energy error over a swing shrinks ~4x when h halves
        sys = FunctionDAE(lambda x, y: np.vstack([x[1:2], -np.sin(x[0:1])]), None, nx=2)

        def energy(x):
            return 0.5 * x[1] ** 2 - math.cos(x[0])

        e0 = energy(np.array([1.0, 0.0]))
        drifts = []
        for h in (0.04, 0.02):
            st = Stepper(sys, StepControl(h_step=h, tick=h, newton_tol=1e-13))
            x, y, f, worst = np.array([1.0, 0.0]), np.zeros(0), None, 0.0
            for k in range(int(round(6.8 / h))):
                x, y, f = st.step(x, y, h, k * h, f)
                worst = max(worst, abs(energy(x) - e0))
            drifts.append(worst)
        assert drifts[0] / drifts[1] == pytest.approx(4.0, rel=0.25)

    def test_newton_failure_reports_mismatch(self):
        sys = FunctionDAE(lambda x, y: -x, lambda x, y: y ** 2 + 1.0, nx=1, ny=1)
        with pytest.raises(StepFailure) as exc:
            Stepper(sys, StepControl(max_newton=5)).step(np.array([1.0]), np.array([0.0]), 0.01)
        assert exc.value.mismatch > 0.5
        assert exc.value.bus == 0
        assert exc.value.t == pytest.approx(0.01)


class TestControlAndEvents:
    def test_step_control_validation(self):
        with pytest.raises(ParameterError):
            StepControl(h_step=0.0)
        with pytest.raises(ParameterError):
            StepControl(h_step=0.0105, tick=1e-3)
        with pytest.raises(ParameterError):
            StepControl(max_newton=0)

    def test_event_validation(self):
        with pytest.raises(ParameterError):
            Event(-1.0, "load_off", 1)
        with pytest.raises(ParameterError):
            Event(1.0, "explode", 1)

    def test_step_must_resolve_evaluation_intervals(self):
        sc = wscc9_builtin("SDD", 90, dd_params={"dt_eval": 0.01})
        with pytest.raises(ParameterError):
            simulate(sc.model, [], StepControl(), 1.0)


@pytest.fixture(scope="module")
def grid():
    sc = wscc9_builtin("SDD", 90, seed=1)
    dae = GridDAE(sc.model, build_fleet(sc.model.fleet, sc.model.bus_ids(), 1))
    return sc, dae


class TestProcessEvents:
    def test_empty_queue_is_identity(self, grid):
        sc, dae = grid
        s0 = dae.initial_state()
        s1, _ = process_events([], s0, dae, 15.0)
        assert s1 is s0

    def test_load_trip(self):
        sc = wscc9_builtin("SDD", 90)
        dae = GridDAE(sc.model, build_fleet(sc.model.fleet, sc.model.bus_ids(), 0))
        s0 = dae.initial_state()
        b5 = dae.idx[5]
        before = dae.load_p[b5]
        q = [Event(15.0, "load_off", 1), Event(20.0, "fault_apply", 5, (1e-3,))]
        s1, _ = process_events(q, s0, dae, 15.0)
        assert before - dae.load_p[b5] == pytest.approx(1.1)
        assert len(q) == 1
        assert not s1.z["load_status"][0]
        assert s1.u[1 + b5] == pytest.approx(0.9)
        g = dae.fg(np.concatenate([s1.x, s1.y])[:, None])[dae.nx:, 0]
        assert np.max(np.abs(g)) <= 1e-8

    def test_fault_perturbs_and_restores_ybus(self):
        sc = wscc9_builtin("SDD", 90)
        dae = GridDAE(sc.model, build_fleet(sc.model.fleet, sc.model.bus_ids(), 0))
        s = dae.initial_state()
        y0 = dae.ybus.copy()
        k = dae.idx[5]
        s, _ = process_events([Event(20.0, "fault_apply", 5, (1e-3,))], s, dae, 20.0)
        assert dae.ybus[k, k] - y0[k, k] == pytest.approx(1000.0)
        assert s.y[dae.n + k] < 0.05
        s, _ = process_events([Event(22.0, "fault_clear", 5)], s, dae, 22.0)
        assert (dae.ybus != y0).nnz == 0

    def test_unknown_targets(self):
        sc = wscc9_builtin("SDD", 90)
        with pytest.raises(ScenarioError):
            simulate(sc.model, [Event(1.0, "load_off", 99)], StepControl(), 2.0)
        with pytest.raises(ScenarioError):
            simulate(sc.model, [Event(1.0, "fault_apply", 42, (0.01,))], StepControl(), 2.0)


@pytest.fixture(scope="module")
def trip_runs():
    out = {}
    for seed in (3, 4):
        sc = wscc9_builtin("SDD", 900, seed=seed, t_end=6.0)
        sc.events = [Event(1.0, "load_off", 2)]
        out[seed] = (sc, sc.run())
    sc = wscc9_builtin("SDD", 900, seed=3, t_end=6.0)
    sc.events = [Event(1.0, "load_off", 2)]
    out["again"] = (sc, sc.run())
    return out


class TestSimulate:
    def test_equilibrium_preserved(self):
        sc = wscc9_builtin("SDD", 900, seed=0, t_end=4.0, events=False)
        ts = sc.run()
        assert len(ts.switches) == 0
        assert np.max(np.abs(ts.freq() - 1.0)) < 1e-9
        assert np.ptp(ts.block("v_"), axis=0).max() < 1e-9

    def test_columns_and_feasibility(self, trip_runs):
        _, ts = trip_runs[3]
        assert ts.columns[0] == "t"
        assert ts.columns[-3:] == ["imbalance", "gf_power", "shortfall"]
        assert ts.data.shape == (601, len(ts.columns))
        assert ts.residual_max <= 1e-8
        assert ts.failure is None
        np.testing.assert_allclose(np.diff(ts.t), 0.01, atol=1e-12)

    def test_devices_respond(self, trip_runs):
        _, ts = trip_runs[3]
        assert len(ts.switches) > 0
        # 0.3 pu of load dropped: switched power heads negative
        assert ts.dd_power()[-1].sum() < -0.05

    def test_switch_times_on_device_phase(self, trip_runs):
        _, ts = trip_runs[3]
        t, ids, bus, h_old, h_new = ts.switches.arrays()
        phase = np.concatenate([g.phase for g in ts.fleet.groups])
        first = min(int(g.ids[0]) for g in ts.fleet.groups)
        ph = phase[ids - first]
        resid = (t - ph) % 1.0
        resid = np.minimum(resid, 1.0 - resid)
        assert resid.max() <= 0.5e-3 + 1e-9

    def test_freeze_between_evaluations(self, trip_runs):
        _, ts = trip_runs[3]
        t, ids, *_ = ts.switches.arrays()
        for d in np.unique(ids)[:200]:
            ts_d = np.sort(t[ids == d])
            if len(ts_d) > 1:
                gaps = np.diff(ts_d)
                assert np.all(np.abs(gaps - np.round(gaps)) < 1e-9)

    def test_switch_log_consistent_with_totals(self, trip_runs):
        _, ts = trip_runs[3]
        t, ids, bus, h_old, h_new = ts.switches.arrays()
        final = np.concatenate([g.h for g in ts.fleet.groups])
        first = min(int(g.ids[0]) for g in ts.fleet.groups)
        net = np.zeros_like(final)
        np.add.at(net, ids - first, h_new - h_old)
        np.testing.assert_array_equal(net, final)

    def test_group_power_sums_to_bus_power(self, trip_runs):
        _, ts = trip_runs[3]
        per_bus = np.zeros((len(ts.t), len(ts.bus_ids)))
        for k, b in enumerate(ts.group_bus):
            per_bus[:, ts.bus_ids.index(b)] += ts.group_power[:, k]
        np.testing.assert_allclose(per_bus, ts.dd_power(), atol=1e-12)

    def test_deterministic(self, trip_runs):
        _, a = trip_runs[3]
        _, b = trip_runs["again"]
        np.testing.assert_array_equal(a.data, b.data)
        for u, v in zip(a.switches.arrays(), b.switches.arrays()):
            np.testing.assert_array_equal(u, v)

    def test_seed_changes_switches_not_physics(self, trip_runs):
        _, a = trip_runs[3]
        _, b = trip_runs[4]
        assert not np.array_equal(a.switches.arrays()[1], b.switches.arrays()[1])
        assert np.max(np.abs(a.freq() - b.freq())) < 2e-3
        assert np.max(np.abs(a.block("v_") - b.block("v_"))) < 5e-3

    def test_failure_returns_partial_series(self, monkeypatch):
        real = integrator.Stepper.step

        def flaky(self, x0, y0, h, t=0.0, f0=None):
            if t > 0.5:
                raise StepFailure("forced", t=t, bus=5, mismatch=1.0)
            return real(self, x0, y0, h, t, f0)

        monkeypatch.setattr(integrator.Stepper, "step", flaky)
        sc = wscc9_builtin("SDD", 90, t_end=2.0, events=False)
        ts = sc.run()
        assert ts.failure["bus"] == 5
        assert 0.4 < ts.t[-1] <= 0.52
        with pytest.raises(StepFailure):
            sc.run(raise_on_failure=True)

    def test_cdd_machines_hold_frequency(self):
        sc = wscc9_builtin("CDD", 0, t_end=3.0, events=False)
        ts = sc.run()
        assert np.max(np.abs(ts.block("omega_m") - 1.0)) < 1e-9
        assert np.max(np.abs(ts.freq() - 1.0)) < 1e-9
