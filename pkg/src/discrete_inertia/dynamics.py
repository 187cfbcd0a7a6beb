"""Continuous device models.

The virtual swing controller of a discrete-device fleet and the classical
synchronous machine with a first-order droop governor. Both are plain
derivative functions; the integrator owns the state vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

OMEGA_S = 2.0 * math.pi * 60.0


@dataclass
class VirtualSwingState:
    delta: float = 0.0
    omega: float = 1.0
    p_ref: float = 0.0


@dataclass(frozen=True)
class DDParams:
    """Virtual swing and switching parameters of a discrete device (or fleet).

    ``M``, ``D``, ``R`` and ``K_p`` are per unit of ``base`` (pu of the system
    base), the rating of the virtual machine. ``dp`` is the block size and
    ``n_blocks`` the number of blocks; ``dt_eval`` is the evaluation interval
    and ``phase`` the offset of the first evaluation.
    """

    M: float = 5.0
    D: float = 1.0
    R: float = 0.05
    K_p: float = 10.0
    db: float = 0.0
    dp: float = 0.01
    n_blocks: int = 1
    dt_eval: float = 1.0
    phase: float = 0.0
    pf_angle: float = 0.0
    base: float = 1.0

    def __post_init__(self):
        problems = []
        if not self.M > 0:
            problems.append("M must be positive")
        if not self.R > 0:
            problems.append("R must be positive")
        if not self.dp > 0:
            problems.append("dp must be positive")
        if not self.n_blocks >= 1:
            problems.append("n_blocks must be at least 1")
        if not self.db >= 0:
            problems.append("db must be nonnegative")
        if not self.dt_eval > 0:
            problems.append("dt_eval must be positive")
        if not 0.0 <= self.phase < self.dt_eval:
            problems.append("phase must lie in [0, dt_eval)")
        if not self.base > 0:
            problems.append("base must be positive")
        if problems:
            raise ParameterError("; ".join(problems))


@dataclass
class MachineState:
    delta: float = 0.0
    omega: float = 1.0
    p_m: float = 0.0


@dataclass(frozen=True)
class MachineParams:
    H: float
    D: float = 0.0
    R: float = 0.05
    T_gov: float = 0.5
    p_m0: float = 0.0
    omega_s: float = OMEGA_S

    def __post_init__(self):
        if not self.H > 0:
            raise ParameterError("machine inertia H must be positive")
        if not self.R > 0 or not self.T_gov > 0:
            raise ParameterError("governor R and T_gov must be positive")


def deadband(err, half_width):
    """Offset dead-band: zero inside ``[-w, w]``, shifted linear outside."""
    if np.any(np.asarray(half_width) < 0):
        raise ParameterError("dead-band half width must be nonnegative")
    return np.sign(err) * np.maximum(np.abs(err) - half_width, 0.0)


def dd_electrical_power(delta, theta, v, K_p):
    """Virtual electrical power ``K_p * v * sin(delta - theta)``."""
    return K_p * v * np.sin(delta - theta)


def dd_derivatives(state: VirtualSwingState, p_tilde: float, omega_ref: float, params: DDParams):
    """Right-hand side of the virtual swing equation.

    ``p_tilde`` is the switched power actually delivered, per unit of
    ``params.base``. The droop term opposes the frequency error so that the
    virtual governor releases power when the speed is high.
    """
    dw = state.omega - omega_ref
    d_delta = dw
    d_omega = (state.p_ref - p_tilde - params.D * dw) / params.M
    d_pref = -deadband(dw, params.db) / params.R - state.p_ref
    return d_delta, d_omega, d_pref


def dd_jacobian(state: VirtualSwingState, theta: float, v: float, params: DDParams):
    """Analytic Jacobian of the closed loop with ``p_tilde = p_e`` (no quantization).

    Columns are (delta, omega, p_ref). Valid away from the dead-band edges.
    """
    c = params.K_p * v * math.cos(state.delta - theta)
    slope = 0.0 if abs(state.omega - 1.0) < params.db else 1.0
    return np.array([
        [0.0, 1.0, 0.0],
        [-c / params.M, -params.D / params.M, 1.0 / params.M],
        [0.0, -slope / params.R, -1.0],
    ])


def machine_derivatives(state: MachineState, p_e: float, params: MachineParams):
    """Classical machine swing with a first-order droop governor."""
    dw = state.omega - 1.0
    d_delta = params.omega_s * dw
    d_omega = (state.p_m - p_e - params.D * dw) / (2.0 * params.H)
    d_pm = (params.p_m0 - dw / params.R - state.p_m) / params.T_gov
    return d_delta, d_omega, d_pm
