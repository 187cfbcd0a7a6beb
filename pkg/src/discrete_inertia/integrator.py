"""Hybrid DAE time stepping.

Differential states advance with the implicit trapezoidal rule, solved
simultaneously with the algebraic network equations by Newton's method.
Faults, load switching and discrete-device evaluations are breakpoints: no
step straddles one, and the algebraic variables are re-solved after each.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import InitializationError, ModelError, ParameterError, ScenarioError, StepFailure
from .fleet import BalanceMonitor, Fleet, SwitchLog, build_fleet, default_epsilon
from .model import CDD, SDD, SystemModel
from .network import FaultSpec, apply_fault, bus_index, build_ybus, low_voltage_scale, solve_initial_power_flow

log = logging.getLogger(__name__)

EVENT_KINDS = ("fault_apply", "fault_clear", "load_off", "load_on", "setpoint_change")


@dataclass
class StepControl:
    h_step: float = 0.01
    newton_tol: float = 1e-8
    max_newton: int = 50
    tick: float = 1e-3  # resolution of device evaluation instants

    def __post_init__(self):
        if not self.h_step > 0 or not self.tick > 0:
            raise ParameterError("h_step and tick must be positive")
        if not self.newton_tol > 0 or self.max_newton < 1:
            raise ParameterError("newton_tol must be positive and max_newton at least 1")
        ratio = self.h_step / self.tick
        if abs(ratio - round(ratio)) > 1e-9:
            raise ParameterError("h_step must be a whole number of ticks")


@dataclass(frozen=True)
class Event:
    """Timed discrete action.

    ``target`` is a bus id for fault events and a load id otherwise.
    ``payload`` is ``(r_fault,)`` for ``fault_apply`` and ``(p, q)`` for
    ``setpoint_change``.
    """

    t: float
    kind: str
    target: int
    payload: tuple = ()

    def __post_init__(self):
        if not self.t >= 0:
            raise ParameterError(f"event time must be nonnegative, got {self.t}")
        if self.kind not in EVENT_KINDS:
            raise ParameterError(f"unknown event kind {self.kind!r}")


@dataclass
class SystemState:
    """Partitioned hybrid state.

    ``x`` differential, ``y`` algebraic (angles then magnitudes), ``u``
    inputs (frequency reference then per-bus scheduled load P and Q) and
    ``z`` discrete: load status, active faults and switched device power per
    fleet group.
    """

    t: float
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray = field(default_factory=lambda: np.ones(1))
    z: dict = field(default_factory=dict)

    def copy(self) -> "SystemState":
        z = {k: (v.copy() if isinstance(v, np.ndarray) else dict(v) if isinstance(v, dict) else v)
             for k, v in self.z.items()}
        return SystemState(self.t, self.x.copy(), self.y.copy(), self.u.copy(), z)


# --------------------------------------------------------------------------
# generic DAE and the trapezoidal step
# --------------------------------------------------------------------------

class DAESystem:
    """``x' = f(x, y)``, ``0 = g(x, y)`` with inputs frozen inside a step.

    Subclasses implement :meth:`fg` on a stacked ``X = [x; y]`` of shape
    ``(nx + ny, k)`` and return ``[f; g]`` of the same shape, so the
    finite-difference Jacobian is a single vectorised call.
    """

    nx: int = 0
    ny: int = 0
    version: int = 0  # bumped whenever inputs jump

    def fg(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        n = X.size
        eps = 1e-7 * np.maximum(1.0, np.abs(X))
        base = self.fg(X[:, None])
        pert = self.fg(X[:, None] + np.diag(eps))
        return (pert - base) / eps

    def mismatch_bus(self, g: np.ndarray):
        """Identify where the algebraic mismatch is largest (index by default)."""
        return int(np.argmax(np.abs(g))) if g.size else None


class FunctionDAE(DAESystem):
    """DAE from plain callables ``f(x, y)`` and ``g(x, y)`` acting on columns."""

    def __init__(self, f, g, nx: int, ny: int = 0):
        self._f, self._g, self.nx, self.ny = f, g, nx, ny

    def fg(self, X):
        x, y = X[: self.nx], X[self.nx:]
        parts = [np.asarray(self._f(x, y), float).reshape(self.nx, -1)]
        if self.ny:
            parts.append(np.asarray(self._g(x, y), float).reshape(self.ny, -1))
        return np.vstack(parts)


class Stepper:
    """Newton solver for trapezoidal steps with a reused Jacobian."""

    def __init__(self, system: DAESystem, control: StepControl):
        self.sys = system
        self.ctl = control
        self._J = None
        self._J_version = None
        self._lu = None
        self._lu_key = None

    def _refresh(self, X):
        self._J = self.sys.jacobian(X)
        self._J_version = self.sys.version
        self._lu_key = None

    def _factor(self, h, algebraic_only=False):
        key = ("alg",) if algebraic_only else ("trap", h)
        if self._lu_key == key:
            return self._lu
        nx = self.sys.nx
        J = self._J
        if algebraic_only:
            A = J[nx:, nx:]
        else:
            A = J.copy()
            A[:nx] *= -0.5 * h
            A[:nx, :nx] += np.eye(nx)
        self._lu = lu_factor(A, check_finite=False)
        self._lu_key = key
        return self._lu

    def _newton(self, residual, X, h, algebraic_only, t):
        """Quasi-Newton with a stored Jacobian, refreshed when contraction is
        poor, and backtracking on the residual 2-norm once it is fresh."""
        sys, ctl = self.sys, self.ctl
        nx = sys.nx
        fresh = False
        if self._J is None or self._J_version != sys.version:
            self._refresh(self._full(X, algebraic_only))
            fresh = True
        F = residual(X)
        err = float(np.max(np.abs(F))) if F.size else 0.0
        for it in range(ctl.max_newton):
            if not np.isfinite(err):
                break
            if err <= ctl.newton_tol:
                return X, it
            norm = float(np.linalg.norm(F))
            dX = lu_solve(self._factor(h, algebraic_only), F, check_finite=False)
            alpha = 1.0
            while True:
                Xn = X - alpha * dX
                Fn = residual(Xn)
                nn = float(np.linalg.norm(Fn))
                if np.isfinite(nn) and nn < (1.0 - 1e-4 * alpha) * norm:
                    break
                if not fresh:
                    # poor step from a stale Jacobian: refresh before damping
                    self._refresh(self._full(X, algebraic_only))
                    fresh = True
                    dX = lu_solve(self._factor(h, algebraic_only), F, check_finite=False)
                    continue
                alpha *= 0.5
                if alpha < 1.0 / 1024:
                    break
            slow = nn > 0.25 * norm
            X, F = Xn, Fn
            err = float(np.max(np.abs(F))) if np.all(np.isfinite(F)) else math.inf
            fresh = False
            if slow:
                self._refresh(self._full(X, algebraic_only))
                fresh = True
        if np.isfinite(err) and err <= ctl.newton_tol:
            return X, ctl.max_newton
        g = F[nx:] if not algebraic_only else F
        raise StepFailure(
            f"Newton did not converge at t={t:.6f} s; max mismatch {err:.3e}",
            t=t, bus=sys.mismatch_bus(g), mismatch=err)

    def _full(self, X, algebraic_only):
        return np.concatenate([self._x_fixed, X]) if algebraic_only else X

    def step(self, x0, y0, h, t=0.0, f0=None):
        """One trapezoidal step of length ``h``; returns ``(x1, y1, f1)``."""
        sys = self.sys
        nx = sys.nx
        X0 = np.concatenate([x0, y0])
        if f0 is None:
            f0 = sys.fg(X0[:, None])[:nx, 0]
        base = x0 + 0.5 * h * f0

        def residual(X):
            G = sys.fg(X[:, None])[:, 0]
            out = G.copy()
            out[:nx] = X[:nx] - base - 0.5 * h * G[:nx]
            return out

        X = X0.copy()
        X[:nx] += h * f0  # explicit predictor
        X, _ = self._newton(residual, X, h, False, t + h)
        f1 = sys.fg(X[:, None])[:nx, 0]
        return X[:nx], X[nx:], f1

    def solve_algebraic(self, x, y0, t=0.0):
        """Solve ``g(x, y) = 0`` for ``y`` with ``x`` frozen."""
        sys = self.sys
        nx = sys.nx
        self._x_fixed = x
        self._lu_key = None

        def residual(Y):
            return sys.fg(np.concatenate([x, Y])[:, None])[nx:, 0]

        try:
            self._J = None
            Y, _ = self._newton(residual, y0.copy(), 0.0, True, t)
        finally:
            self._lu_key = None
        return Y


def step(state: SystemState, system: DAESystem, control: StepControl, h: float | None = None,
         stepper: Stepper | None = None) -> SystemState:
    """Advance ``state`` by one trapezoidal step (``control.h_step`` unless ``h`` given).

    Inputs and discrete variables are frozen during the step.
    """
    h = control.h_step if h is None else h
    stepper = stepper or Stepper(system, control)
    x1, y1, _ = stepper.step(state.x, state.y, h, state.t)
    out = state.copy()
    out.t = state.t + h
    out.x, out.y = x1, y1
    return out


# --------------------------------------------------------------------------
# the power-system DAE
# --------------------------------------------------------------------------

class GridDAE(DAESystem):
    """Compiled DAE of a :class:`SystemModel` plus its fleet groups.

    Differential state layout: machines (delta, omega, p_m) in CDD mode,
    grid-forming units (delta, omega), fleet groups (delta, omega, p_ref),
    then one frequency-estimator state per bus. Algebraic: angles then
    voltage magnitudes.
    """

    def __init__(self, model: SystemModel, fleet: Fleet):
        model.check()
        self.model = model
        self.fleet = fleet
        self.omega_s = model.omega_s
        self.bus_ids = model.bus_ids()
        self.idx = bus_index(model.buses)
        n = self.n = len(model.buses)
        self.ybus_base = build_ybus(model.buses, model.branches)
        self.faults: dict[int, float] = {}
        self._set_ybus()

        self.dynamic_machines = model.mode == CDD
        mach = model.machines
        self.nm = len(mach) if self.dynamic_machines else 0
        self.m_bus = np.array([self.idx[m.bus] for m in mach], dtype=int)
        if len(set(self.m_bus.tolist())) != len(mach):
            raise ModelError("at most one machine per bus is supported")
        self.m_H = np.array([m.H for m in mach])
        self.m_D = np.array([m.D for m in mach])
        self.m_xd = np.array([m.x_d for m in mach])
        self.m_R = np.array([m.R for m in mach])
        self.m_Tg = np.array([m.T_gov for m in mach])
        self.m_E = np.zeros(len(mach))
        self.m_pm0 = np.zeros(len(mach))
        self.m_pq = np.zeros((len(mach), 2))  # constant PQ injections in SDD mode

        gf = model.gf_units
        self.ng = len(gf)
        self.g_bus = np.array([self.idx[u.bus] for u in gf], dtype=int)
        self.g_H = np.array([u.H for u in gf])
        self.g_S = np.array([u.S for u in gf])
        self.g_x = np.array([u.x for u in gf])
        self.g_D = np.array([u.D for u in gf])
        self.g_E = np.zeros(self.ng)
        self._g_HS = self.g_H * self.g_S

        grp = fleet.groups
        self.nd = len(grp)
        self.d_bus = np.array([self.idx[g.bus] for g in grp], dtype=int)
        self.d_M = np.array([g.params.M for g in grp])
        self.d_D = np.array([g.params.D for g in grp])
        self.d_R = np.array([g.params.R for g in grp])
        self.d_K = np.array([g.params.K_p for g in grp])
        self.d_db = np.array([g.params.db for g in grp])
        self.d_base = np.array([g.params.base for g in grp])
        self.d_tan = np.array([math.tan(g.params.pf_angle) for g in grp])
        self.d_ptilde = np.zeros(self.nd)

        self.load_p = np.zeros(n)
        self.load_q = np.zeros(n)
        self.load_index = {ld.id: k for k, ld in enumerate(model.loads)}
        self.load_status = np.array([ld.status for ld in model.loads], dtype=bool)
        self.load_pq = np.array([[ld.p, ld.q] for ld in model.loads], dtype=float).reshape(-1, 2)
        self._refresh_loads()
        self.omega_ref = 1.0

        # bus incidence of each device kind, so injections sum by matrix product
        self.C_m = self._incidence(self.m_bus)
        self.C_g = self._incidence(self.g_bus)
        self.C_d = self._incidence(self.d_bus)

        self.o_m = 0
        self.o_g = 3 * self.nm
        self.o_d = self.o_g + 2 * self.ng
        self.o_f = self.o_d + 3 * self.nd
        self.nx = self.o_f + n
        self.ny = 2 * n

    def _incidence(self, buses):
        C = np.zeros((self.n, len(buses)))
        C[buses, np.arange(len(buses))] = 1.0
        return C

    # ---- inputs ---------------------------------------------------------
    def _set_ybus(self):
        Y = self.ybus_base
        for bus, r in sorted(self.faults.items()):
            Y = apply_fault(Y, FaultSpec(bus, r), self.model.buses)
        self.ybus = Y
        self._Y = Y.toarray()

    def _refresh_loads(self):
        self.load_p[:] = 0.0
        self.load_q[:] = 0.0
        for k, ld in enumerate(self.model.loads):
            if self.load_status[k]:
                self.load_p[self.idx[ld.bus]] += self.load_pq[k, 0]
                self.load_q[self.idx[ld.bus]] += self.load_pq[k, 1]

    def set_group_power(self, gi: int, p: float):
        if p != self.d_ptilde[gi]:
            self.d_ptilde[gi] = p
            self.version += 1

    # ---- initialisation -------------------------------------------------
    def initial_state(self) -> SystemState:
        pf = solve_initial_power_flow(self.model)
        v, th = pf.v, pf.theta
        x = np.zeros(self.nx)
        # the power flow reports generation net of local load
        net_p = pf.p_net + self.load_p
        net_q = pf.q_net + self.load_q
        for k in range(len(self.model.machines)):
            b = self.m_bus[k]
            self.m_pq[k] = (net_p[b], net_q[b])
            if self.dynamic_machines:
                V = v[b] * np.exp(1j * th[b])
                I = np.conj(complex(net_p[b], net_q[b]) / V)
                E = V + 1j * self.m_xd[k] * I
                self.m_E[k] = abs(E)
                self.m_pm0[k] = net_p[b]
                x[3 * k] = np.angle(E)
                x[3 * k + 1] = 1.0
                x[3 * k + 2] = net_p[b]
        for k in range(self.ng):
            b = self.g_bus[k]
            self.g_E[k] = v[b]
            x[self.o_g + 2 * k] = th[b]
            x[self.o_g + 2 * k + 1] = 1.0
        for k in range(self.nd):
            b = self.d_bus[k]
            x[self.o_d + 3 * k] = th[b] / self.omega_s
            x[self.o_d + 3 * k + 1] = 1.0
        x[self.o_f:] = th
        y = np.concatenate([th, v])
        z = {"load_status": self.load_status.copy(), "faults": dict(self.faults),
             "p_tilde": self.d_ptilde.copy()}
        u = np.concatenate([[self.omega_ref], self.load_p, self.load_q])
        self.version += 1
        return SystemState(0.0, x, y, u, z)

    # ---- equations ------------------------------------------------------
    def injections(self, X):
        """Per-bus injected P, Q from devices for stacked columns ``X``."""
        n = self.n
        th, v = X[self.nx:self.nx + n], X[self.nx + n:]
        vmin = self.model.v_min
        scale = np.where(v >= vmin, 1.0, (v / vmin) ** 2)
        P = -self.load_p[:, None] * scale
        Q = -self.load_q[:, None] * scale
        extra = {}
        if self.dynamic_machines and self.nm:
            d = X[0:3 * self.nm:3]
            b = self.m_bus
            ang = d - th[b]
            vb = v[b]
            E = self.m_E[:, None]
            xd = self.m_xd[:, None]
            pe = E * vb * np.sin(ang) / xd
            qe = (E * vb * np.cos(ang) - vb * vb) / xd
            P += self.C_m @ pe
            Q += self.C_m @ qe
            extra["machine_pe"] = pe
        elif len(self.m_pq):
            b = self.m_bus
            P += self.C_m @ (self.m_pq[:, 0:1] * scale[b])
            Q += self.C_m @ (self.m_pq[:, 1:2] * scale[b])
        if self.ng:
            d = X[self.o_g:self.o_d:2]
            b = self.g_bus
            ang = d - th[b]
            vb = v[b]
            E = self.g_E[:, None]
            xg = self.g_x[:, None]
            pg = E * vb * np.sin(ang) / xg
            qg = (E * vb * np.cos(ang) - vb * vb) / xg
            P += self.C_g @ pg
            Q += self.C_g @ qg
            extra["gf_p"] = pg
        if self.nd:
            b = self.d_bus
            pt = self.d_ptilde[:, None] * scale[b]
            P += self.C_d @ pt
            Q += self.C_d @ (pt * self.d_tan[:, None])
        return P, Q, extra

    def fg(self, X):
        n, nx = self.n, self.nx
        th, v = X[nx:nx + n], X[nx + n:]
        P, Q, extra = self.injections(X)
        V = v * np.exp(1j * th)
        S = V * np.conj(self._Y @ V)
        out = np.empty_like(X)
        # mismatch per unit voltage: same roots for v > 0 but no spurious v = 0 root
        out[nx:nx + n] = (P - S.real) / v
        out[nx + n:] = (Q - S.imag) / v
        ws = self.omega_s
        if self.nm:
            w = X[1:3 * self.nm:3]
            pm = X[2:3 * self.nm:3]
            dw = w - 1.0
            out[0:3 * self.nm:3] = ws * dw
            out[1:3 * self.nm:3] = (pm - extra["machine_pe"] - self.m_D[:, None] * dw) / (2 * self.m_H[:, None])
            out[2:3 * self.nm:3] = (self.m_pm0[:, None] - dw / self.m_R[:, None] - pm) / self.m_Tg[:, None]
        if self.ng:
            w = X[self.o_g + 1:self.o_d:2]
            dw = w - 1.0
            # damping against the buffer's centre of inertia only damps relative
            # swings and carries no power in steady state
            w_coi = (self._g_HS @ w) / self._g_HS.sum()
            out[self.o_g:self.o_d:2] = ws * dw
            out[self.o_g + 1:self.o_d:2] = (-extra["gf_p"] / self.g_S[:, None] - self.g_D[:, None] * (w - w_coi)) / (
                2 * self.g_H[:, None])
        if self.nd:
            w = X[self.o_d + 1:self.o_f:3]
            pr = X[self.o_d + 2:self.o_f:3]
            dw = w - self.omega_ref
            db = self.d_db[:, None]
            dead = np.sign(dw) * np.maximum(np.abs(dw) - db, 0.0)
            out[self.o_d:self.o_f:3] = dw
            out[self.o_d + 1:self.o_f:3] = (pr - self.d_ptilde[:, None] / self.d_base[:, None]
                                            - self.d_D[:, None] * dw) / self.d_M[:, None]
            out[self.o_d + 2:self.o_f:3] = -dead / self.d_R[:, None] - pr
        out[self.o_f:nx] = (th - X[self.o_f:nx]) / self.model.pll_tf
        return out

    def normalize(self, x, y):
        """Canonical polar form: positive magnitudes, angles within pi of the
        frequency-estimator states so the estimate sees no 2*pi jumps."""
        n = self.n
        y = y.copy()
        neg = y[n:] < 0
        y[n:][neg] *= -1.0
        y[:n][neg] += math.pi
        ref = x[self.o_f:]
        y[:n] -= 2.0 * math.pi * np.round((y[:n] - ref) / (2.0 * math.pi))
        return y

    def mismatch_bus(self, g):
        if g.size != self.ny:
            return None
        k = int(np.argmax(np.abs(g))) % self.n
        return self.bus_ids[k]

    # ---- derived quantities --------------------------------------------
    def group_virtual_power(self, x, y):
        """Continuous virtual power ``p_e`` of every group (pu)."""
        n = self.n
        d = x[self.o_d:self.o_f:3]
        xi = x[self.o_f:]
        v = y[n:]
        b = self.d_bus
        return self.d_base * self.d_K * v[b] * np.sin(d - xi[b] / self.omega_s)

    def bus_frequency(self, x, y):
        th = y[:self.n]
        return 1.0 + (th - x[self.o_f:]) / (self.model.pll_tf * self.omega_s)

    def gf_power(self, x, y):
        if not self.ng:
            return np.zeros(0)
        X = np.concatenate([x, y])[:, None]
        return self.injections(X)[2]["gf_p"][:, 0]

    def imbalance(self, x, y) -> float:
        """Generation minus consumption minus losses (pu) at the given solution."""
        X = np.concatenate([x, y])
        g = self.fg(X[:, None])[self.nx:self.nx + self.n, 0]
        return float(np.sum(g * y[self.n:]))

    def machine_omega(self, x):
        if self.nm:
            return x[1:3 * self.nm:3]
        if self.ng:
            return x[self.o_g + 1:self.o_d:2]
        return np.zeros(0)

    def bus_dd_power(self):
        out = np.zeros(self.n)
        np.add.at(out, self.d_bus, self.d_ptilde)
        return out

    # ---- events -----------------------------------------------------------
    def apply_event(self, ev: Event):
        if ev.kind in ("fault_apply", "fault_clear"):
            if ev.target not in self.idx:
                raise ScenarioError(f"event at t={ev.t}: unknown bus {ev.target}")
            if ev.kind == "fault_apply":
                r = float(ev.payload[0]) if ev.payload else 1e-3
                FaultSpec(ev.target, r)  # validates r
                self.faults[ev.target] = r
            else:
                self.faults.pop(ev.target, None)
            self._set_ybus()
        else:
            if ev.target not in self.load_index:
                raise ScenarioError(f"event at t={ev.t}: unknown load {ev.target}")
            k = self.load_index[ev.target]
            if ev.kind == "load_off":
                self.load_status[k] = False
            elif ev.kind == "load_on":
                self.load_status[k] = True
            else:
                self.load_pq[k] = (float(ev.payload[0]), float(ev.payload[1]) if len(ev.payload) > 1 else 0.0)
            self._refresh_loads()
        self.version += 1


def process_events(queue, state: SystemState, system: GridDAE, t: float, stepper: Stepper | None = None,
                   tol: float = 1e-9):
    """Apply every event of ``queue`` with ``event.t <= t`` and re-solve the network.

    ``queue`` is a list sorted by time; applied events are removed from it.
    Returns ``(state, system)``.
    """
    applied = False
    while queue and queue[0].t <= t + tol:
        system.apply_event(queue.pop(0))
        applied = True
    if not applied:
        return state, system
    out = state.copy()
    out.y = _resolve(system, out.x, out.y, t, stepper)
    out.z["load_status"] = system.load_status.copy()
    out.z["faults"] = dict(system.faults)
    out.u = np.concatenate([[system.omega_ref], system.load_p, system.load_q])
    return out, system


def _resolve(system, x, y, t, stepper=None):
    stepper = stepper or Stepper(system, StepControl())
    try:
        y1 = stepper.solve_algebraic(x, y, t)
        return system.normalize(x, y1) if isinstance(system, GridDAE) else y1
    except StepFailure:
        n = system.n
        # flat magnitudes, angles from the frequency-estimator states
        flat = np.concatenate([x[system.o_f:] if isinstance(system, GridDAE) else np.zeros(n), np.ones(n)])
        log.info("algebraic re-solve at t=%.4f failed from previous point; retrying flat start", t)
        y1 = stepper.solve_algebraic(x, flat, t)
        return system.normalize(x, y1) if isinstance(system, GridDAE) else y1


# --------------------------------------------------------------------------
# time series
# --------------------------------------------------------------------------

@dataclass
class TimeSeries:
    """Sampled trajectories of one run.

    ``data`` rows are samples; ``columns`` names them in CSV order.
    """

    columns: list
    data: np.ndarray
    bus_ids: list
    switches: SwitchLog
    monitor: BalanceMonitor
    group_power: np.ndarray  # samples x groups, signed switched power
    group_bus: list
    dt_eval: float = 1.0
    failure: dict | None = None
    event_times: list = field(default_factory=list)
    residual_max: float = 0.0

    @property
    def t(self):
        return self.data[:, 0]

    def col(self, name):
        return self.data[:, self.columns.index(name)]

    def block(self, prefix):
        ks = [k for k, c in enumerate(self.columns) if c.startswith(prefix)]
        return self.data[:, ks]

    def freq(self):
        return self.block("f_")

    def dd_power(self):
        return self.block("pdd_")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.data:
                w.writerow([repr(float(v)) for v in row])


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

def _eval_schedule(fleet: Fleet, tick: float):
    """Map tick residue -> list of (group index, device positions)."""
    periods = []
    for g in fleet.groups:
        p = g.params.dt_eval / tick
        if abs(p - round(p)) > 1e-9:
            raise ParameterError("dt_eval must be a whole number of evaluation ticks")
        periods.append(int(round(p)))
    L = 1
    for p in periods:
        L = L * p // math.gcd(L, p)
    table: dict[int, list] = {}
    for gi, (g, P) in enumerate(zip(fleet.groups, periods)):
        t0 = np.floor(g.phase / tick + 0.5).astype(np.int64) % P
        order = np.argsort(t0, kind="stable")
        vals, starts = np.unique(t0[order], return_index=True)
        ends = list(starts[1:]) + [len(order)]
        for r0, s, e in zip(vals, starts, ends):
            pos = order[s:e]
            for m in range(L // P):
                table.setdefault(int(r0) + m * P, []).append((gi, pos))
    return L, table


def simulate(model: SystemModel, events, control: StepControl, t_end: float, seed=0,
             epsilon: float | None = None, fleet: Fleet | None = None, raise_on_failure: bool = False
             ) -> TimeSeries:
    """Run the hybrid simulation from the power-flow operating point to ``t_end``."""
    if not t_end > 0:
        raise ParameterError("t_end must be positive")
    fleet = fleet if fleet is not None else build_fleet(model.fleet, model.bus_ids(), seed)
    for g in fleet.groups:
        if control.h_step > g.params.dt_eval / 2 + 1e-12:
            raise ParameterError("h_step must not exceed half of every dt_eval")
    dae = GridDAE(model, fleet)
    try:
        state = dae.initial_state()
    except InitializationError:
        raise
    stepper = Stepper(dae, control)
    queue = sorted(events, key=lambda e: e.t)
    for ev in queue:
        if ev.kind.startswith("fault") and ev.target not in dae.idx:
            raise ScenarioError(f"event at t={ev.t}: unknown bus {ev.target}")
        if ev.kind.startswith("load") or ev.kind == "setpoint_change":
            if ev.target not in dae.load_index:
                raise ScenarioError(f"event at t={ev.t}: unknown load {ev.target}")
    event_times = sorted({ev.t for ev in queue})

    tick = control.tick
    per_step = int(round(control.h_step / tick))
    n_steps = int(math.ceil(t_end / control.h_step - 1e-9))
    L, table = _eval_schedule(fleet, tick)
    dps = [c.dp for g in fleet.groups for c in g.classes]
    eps = default_epsilon(dps) if epsilon is None else epsilon
    monitor = BalanceMonitor(eps)
    switches = SwitchLog()

    n = dae.n
    cols = (["t"] + [f"v_{b}" for b in dae.bus_ids] + [f"theta_{b}" for b in dae.bus_ids]
            + [f"f_{b}" for b in dae.bus_ids])
    if dae.nm:
        cols += [f"omega_m{m.id}" for m in model.machines]
    elif dae.ng:
        cols += [f"omega_gf{u.id}" for u in model.gf_units]
    cols += [f"pdd_{b}" for b in dae.bus_ids] + ["imbalance", "gf_power", "shortfall"]
    data = np.full((n_steps + 1, len(cols)), np.nan)
    gpow = np.zeros((n_steps + 1, dae.nd))
    resid_max = 0.0

    def evaluate(T, x, y):
        entries = table.get(T % L)
        if not entries:
            return False
        pe = dae.group_virtual_power(x, y)
        omega = x[dae.o_d + 1:dae.o_f:3]
        f_bus = dae.bus_frequency(x, y)[dae.d_bus]
        changed = False
        t_now = T * tick
        for gi, pos in entries:
            g = fleet.groups[gi]
            moved, h_old, h_new = g.evaluate(pos, float(pe[gi]), float(omega[gi]), dae.omega_ref, float(f_bus[gi]))
            if moved.size:
                switches.extend(t_now, g.ids[moved], g.bus, h_old, h_new)
                dae.set_group_power(gi, g.p_tilde())
                changed = True
        return changed

    def record(k, x, y):
        nonlocal resid_max
        X = np.concatenate([x, y])
        G = dae.fg(X[:, None])[:, 0]
        gres = G[dae.nx:]
        resid_max = max(resid_max, float(np.max(np.abs(gres))))
        f = dae.bus_frequency(x, y)
        row = [k * control.h_step, *y[n:], *y[:n], *f, *dae.machine_omega(x), *dae.bus_dd_power()]
        imb = float(np.sum(gres[:n] * y[n:]))
        gfp = float(np.sum(dae.gf_power(x, y)))
        short = float(np.sum(dae.group_virtual_power(x, y) - dae.d_ptilde)) if dae.nd else 0.0
        row += [imb, gfp, short]
        data[k] = row
        gpow[k] = dae.d_ptilde
        monitor.record(k * control.h_step, imb, gfp, short)

    def breakpoint(T, t_now, state, f_prev):
        """Events then device evaluations at ``t_now``; returns updated state and f."""
        nonlocal queue
        jumped = False
        if queue and queue[0].t <= t_now + 1e-9:
            state, _ = process_events(queue, state, dae, t_now, stepper)
            jumped = True
        if T is not None and evaluate(T, state.x, state.y):
            state.y = _resolve(dae, state.x, state.y, t_now, stepper)
            jumped = True
        if jumped:
            f_prev = None
        return state, f_prev

    failure = None
    f_prev = None
    state, f_prev = breakpoint(0, 0.0, state, f_prev)
    record(0, state.x, state.y)
    k_done = 0
    try:
        for k in range(n_steps):
            T_a = k * per_step
            # interior breakpoints: evaluation ticks and event instants
            pts = {}
            for T in range(T_a + 1, T_a + per_step + 1):
                if (T % L) in table:
                    pts[T * tick] = T
            t_b = (k + 1) * control.h_step
            for ev in queue:
                if ev.t > t_b + 1e-9:
                    break
                pts.setdefault(ev.t, None)
            pts.setdefault(t_b, None)
            for t_next in sorted(pts):
                T = pts[t_next]
                if t_next == t_b:
                    T = T_a + per_step if ((T_a + per_step) % L) in table else None
                h = t_next - state.t
                if h > 1e-12:
                    x1, y1, f1 = stepper.step(state.x, state.y, h, state.t, f_prev)
                    state.x, state.y, f_prev = x1, y1, f1
                state.t = t_next
                state, f_prev = breakpoint(T, t_next, state, f_prev)
            state.t = t_b
            record(k + 1, state.x, state.y)
            k_done = k + 1
    except StepFailure as exc:
        failure = {"t": exc.t, "bus": exc.bus, "mismatch": exc.mismatch, "message": str(exc)}
        log.error("simulation aborted: %s", exc)
        if raise_on_failure:
            raise
    state.z["p_tilde"] = dae.d_ptilde.copy()
    ts = TimeSeries(cols, data[:k_done + 1], list(dae.bus_ids), switches, monitor, gpow[:k_done + 1],
                    [g.bus for g in fleet.groups], dt_eval=(fleet.groups[0].params.dt_eval if fleet.groups else 1.0),
                    failure=failure, event_times=event_times, residual_max=resid_max)
    ts.final_state = state
    ts.fleet = fleet
    return ts
