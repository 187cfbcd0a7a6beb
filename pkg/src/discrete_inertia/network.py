"""Static network algebra: admittance matrix, power mismatch, power flow and
bus frequency estimation.

All quantities are per unit on the system base. Angles are in radians.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import InitializationError, ModelError, ParameterError


@dataclass
class Bus:
    id: int
    base_kv: float = 1.0
    v: float = 1.0
    theta: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass
class Branch:
    """Positive-sequence pi-model branch.

    ``tap`` is the off-nominal turns ratio on the ``from`` side.
    ``b_half`` is the charging susceptance placed at each end.
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_half: float = 0.0
    tap: float = 1.0
    status: bool = True

    def __post_init__(self):
        if self.x == 0.0:
            raise ParameterError(f"branch {self.from_bus}-{self.to_bus}: x must be nonzero")
        if self.tap <= 0.0:
            raise ParameterError(f"branch {self.from_bus}-{self.to_bus}: tap must be positive")


@dataclass(frozen=True)
class FaultSpec:
    bus: int
    r_fault: float
    t_apply: float = 0.0
    t_clear: float = math.inf

    def __post_init__(self):
        if not self.r_fault > 0.0:
            raise ParameterError(f"fault resistance must be positive, got {self.r_fault}")
        if not self.t_clear > self.t_apply:
            raise ParameterError("fault must clear after it is applied")


def bus_index(buses) -> dict[int, int]:
    return {b.id: k for k, b in enumerate(buses)}


def build_ybus(buses, branches) -> sparse.csr_matrix:
    """Assemble the complex bus admittance matrix.

    Off-status branches are skipped. Raises ModelError if a branch refers to
    a bus that is not in ``buses``.
    """
    idx = bus_index(buses)
    n = len(buses)
    rows, cols, vals = [], [], []
    for br in branches:
        if br.from_bus not in idx or br.to_bus not in idx:
            raise ModelError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
        if not br.status:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_half
        a = br.tap
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [(ys + bc) / (a * a), ys + bc, -ys / a, -ys / a]
    for k, b in enumerate(buses):
        if b.shunt_g or b.shunt_b:
            rows.append(k)
            cols.append(k)
            vals.append(complex(b.shunt_g, b.shunt_b))
    # coo -> csr sums duplicate entries
    return sparse.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()


def apply_fault(ybus, fault: FaultSpec, buses) -> sparse.csr_matrix:
    """Return a copy of ``ybus`` with a resistive shunt ``1/r_fault`` at the fault bus.

    Removing a fault is done by rebuilding the matrix, never by subtraction,
    so that the pre-fault matrix is restored bit for bit.
    """
    if not fault.r_fault > 0.0 or math.isinf(fault.r_fault):
        raise ParameterError(f"fault resistance must be finite and positive, got {fault.r_fault}")
    idx = bus_index(buses)
    if fault.bus not in idx:
        raise ModelError(f"fault at unknown bus {fault.bus}")
    k = idx[fault.bus]
    out = sparse.lil_matrix(ybus, dtype=complex, copy=True)
    out[k, k] = out[k, k] + 1.0 / fault.r_fault
    return out.tocsr()


def network_injection(v, theta, ybus) -> tuple[np.ndarray, np.ndarray]:
    """Active and reactive power flowing out of each bus into the network."""
    V = v * np.exp(1j * theta)
    S = V * np.conj(ybus @ V)
    return S.real, S.imag


def network_residual(v, theta, ybus, p_inj, q_inj) -> np.ndarray:
    """Power mismatch ``[P_inj - P_net, Q_inj - Q_net]`` stacked per bus.

    Zero iff the algebraic network equations hold for the scheduled
    injections (generation positive, load negative).
    """
    p_net, q_net = network_injection(np.asarray(v, float), np.asarray(theta, float), ybus)
    return np.concatenate([np.asarray(p_inj) - p_net, np.asarray(q_inj) - q_net])


def power_flow_jacobian(v, theta, ybus):
    """Derivatives of the network flows (P_net, Q_net) w.r.t. (theta, v).

    Standard polar form; returns dense blocks ``dP/dth, dP/dv, dQ/dth, dQ/dv``.
    """
    Y = ybus.toarray() if sparse.issparse(ybus) else np.asarray(ybus)
    V = v * np.exp(1j * theta)
    I = Y @ V
    dS_dth = 1j * np.diag(V) @ np.conj(np.diag(I) - Y @ np.diag(V))
    Vn = np.exp(1j * theta)
    dS_dv = np.diag(V) @ np.conj(Y @ np.diag(Vn)) + np.diag(np.conj(I) * Vn)
    return dS_dth.real, dS_dv.real, dS_dth.imag, dS_dv.imag


@dataclass
class PowerFlowResult:
    v: np.ndarray
    theta: np.ndarray
    p_net: np.ndarray  # per-bus net injection into the network
    q_net: np.ndarray
    iterations: int
    mismatch: float
    bus_ids: list = field(default_factory=list)


def solve_power_flow(
    buses,
    ybus,
    p_spec,
    q_spec,
    slack: int,
    pv: list[int] | tuple = (),
    v_set: dict[int, float] | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> PowerFlowResult:
    """Newton-Raphson power flow from a flat start.

    ``p_spec``/``q_spec`` are net scheduled injections per bus (index order of
    ``buses``). ``slack`` and ``pv`` are bus ids; ``v_set`` maps bus id to the
    voltage setpoint of slack/PV buses.
    """
    idx = bus_index(buses)
    n = len(buses)
    v_set = v_set or {}
    s = idx[slack]
    pv_i = [idx[b] for b in pv if idx[b] != s]
    pq_i = [k for k in range(n) if k != s and k not in pv_i]
    v = np.ones(n)
    theta = np.zeros(n)
    for b, vs in v_set.items():
        v[idx[b]] = vs
    p_spec = np.asarray(p_spec, float)
    q_spec = np.asarray(q_spec, float)
    ang = np.array([k for k in range(n) if k != s], dtype=int)
    mag = np.array(pq_i, dtype=int)

    mismatch = math.inf
    for it in range(max_iter + 1):
        p_net, q_net = network_injection(v, theta, ybus)
        F = np.concatenate([p_spec[ang] - p_net[ang], q_spec[mag] - q_net[mag]])
        mismatch = float(np.max(np.abs(F))) if F.size else 0.0
        if mismatch <= tol:
            break
        if it == max_iter:
            raise InitializationError(
                f"power flow did not converge in {max_iter} iterations; "
                f"max mismatch {mismatch:.3e} pu"
            )
        dPt, dPv, dQt, dQv = power_flow_jacobian(v, theta, ybus)
        J = np.block([
            [dPt[np.ix_(ang, ang)], dPv[np.ix_(ang, mag)]],
            [dQt[np.ix_(mag, ang)], dQv[np.ix_(mag, mag)]],
        ])
        dx = np.linalg.solve(J, F)
        theta[ang] += dx[: len(ang)]
        v[mag] += dx[len(ang):]

    p_net, q_net = network_injection(v, theta, ybus)
    return PowerFlowResult(
        v=v,
        theta=theta,
        p_net=p_net,
        q_net=q_net,
        iterations=it,
        mismatch=mismatch,
        bus_ids=[b.id for b in buses],
    )


def solve_initial_power_flow(model, tol: float = 1e-8, max_iter: int = 50) -> PowerFlowResult:
    """Power flow of a :class:`~discrete_inertia.model.SystemModel`.

    Machines set the slack (the one flagged ``slack``) and PV buses; loads in
    service are constant PQ. Discrete devices start switched off.
    """
    buses = model.buses
    idx = bus_index(buses)
    n = len(buses)
    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    for ld in model.loads:
        if ld.status:
            p_spec[idx[ld.bus]] -= ld.p
            q_spec[idx[ld.bus]] -= ld.q
    slack = None
    pv, v_set = [], {}
    for m in model.machines:
        if m.slack:
            slack = m.bus
        else:
            p_spec[idx[m.bus]] += m.p_set
            pv.append(m.bus)
        v_set[m.bus] = m.v_set
    if slack is None:
        if model.machines:
            raise ModelError("no slack machine declared")
        # no machines: first bus is the angle reference
        slack = buses[0].id
        v_set.setdefault(slack, 1.0)
    ybus = build_ybus(buses, model.branches)
    return solve_power_flow(buses, ybus, p_spec, q_spec, slack, pv, v_set, tol, max_iter)


@dataclass(frozen=True)
class FrequencyEstimatorParams:
    """Washout plus first-order filter standing in for a PLL."""

    dt: float
    t_f: float = 0.05
    omega_s: float = 2.0 * math.pi * 60.0

    def __post_init__(self):
        if not self.t_f > 0.0:
            raise ParameterError("filter time constant must be positive")
        if not self.dt > 0.0:
            raise ParameterError("sample time must be positive")


def bus_frequency_estimate(theta_signal, params: FrequencyEstimatorParams) -> np.ndarray:
    """Estimate bus frequency (pu) from a uniformly sampled angle signal.

    Implements ``omega = 1 + (1/omega_s) * s/(1 + s*T_f) * theta`` with the
    trapezoidal rule, the same discretisation the simulator uses for its
    internal filter state. The filter starts in steady state on ``theta[0]``.
    """
    th = np.asarray(theta_signal, float)
    a = params.dt / (2.0 * params.t_f)
    xi = np.empty_like(th)
    xi[0] = th[0]
    for k in range(len(th) - 1):
        xi[k + 1] = ((1.0 - a) * xi[k] + a * (th[k] + th[k + 1])) / (1.0 + a)
    return 1.0 + (th - xi) / (params.t_f * params.omega_s)


def low_voltage_scale(v, v_min: float):
    """Constant-power injections turn into constant impedance below ``v_min``."""
    v = np.asarray(v, float)
    return np.where(v >= v_min, 1.0, (v / v_min) ** 2)
