"""Static description of one grid: buses, branches, machines, loads, grid-forming
buffer units and the discrete-device fleet specification."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .dynamics import OMEGA_S, DDParams
from .errors import ModelError, ParameterError
from .network import Branch, Bus

SDD = "SDD"
CDD = "CDD"
MODES = (SDD, CDD)


@dataclass
class Machine:
    """Synchronous machine.

    In SDD mode it is a constant PQ injection at its power-flow operating
    point. In CDD mode it is a classical machine (emf behind ``x_d``) with a
    droop governor.
    """

    id: int
    bus: int
    p_set: float = 0.0
    v_set: float = 1.0
    slack: bool = False
    H: float = 5.0
    D: float = 0.0
    x_d: float = 0.1
    R: float = 0.05
    T_gov: float = 0.5

    def __post_init__(self):
        if not self.H > 0 or not self.x_d > 0:
            raise ParameterError(f"machine {self.id}: H and x_d must be positive")
        if not self.R > 0 or not self.T_gov > 0:
            raise ParameterError(f"machine {self.id}: R and T_gov must be positive")


@dataclass
class Load:
    id: int
    bus: int
    p: float
    q: float = 0.0
    status: bool = True


@dataclass
class GridFormingUnit:
    """Grid-forming subset of the fleet: a voltage source behind ``x`` whose
    angle follows a swing equation without governor.

    It sets the frequency reference when no synchronous machine is dynamic.
    Its share of the power vanishes once the switched devices carry the
    balance. ``D`` damps swings relative to the other grid-forming units
    (their centre of inertia), never the common frequency.
    """

    id: int
    bus: int
    H: float = 30.0
    S: float = 1.0
    x: float = 0.1
    D: float = 0.0

    def __post_init__(self):
        if not self.H > 0 or not self.S > 0 or not self.x > 0:
            raise ParameterError(f"grid-forming unit {self.id}: H, S and x must be positive")


@dataclass
class FleetEntry:
    """``count`` identical devices of block size ``dp`` at ``bus``.

    ``direction`` is +1 for devices that inject when switched on and -1 for
    devices that consume when switched on. ``params`` holds the virtual swing
    and scheduling constants; its ``dp``/``n_blocks`` fields are ignored in
    favour of this entry's.
    """

    bus: int
    dp: float
    count: int
    n_blocks: int = 1
    direction: int = 1
    params: DDParams = field(default_factory=DDParams)

    def __post_init__(self):
        if self.count < 0:
            raise ParameterError("fleet count must be nonnegative")
        if not self.dp > 0:
            raise ParameterError("fleet block size must be positive")
        if self.direction not in (1, -1):
            raise ParameterError("direction must be +1 or -1")
        if self.n_blocks < 1:
            raise ParameterError("n_blocks must be at least 1")


@dataclass
class SystemModel:
    buses: list
    branches: list
    machines: list = field(default_factory=list)
    loads: list = field(default_factory=list)
    gf_units: list = field(default_factory=list)
    fleet: list = field(default_factory=list)
    mode: str = SDD
    base_mva: float = 100.0
    f_nominal: float = 60.0
    pll_tf: float = 0.05
    v_min: float = 0.7

    @property
    def omega_s(self) -> float:
        return 2.0 * math.pi * self.f_nominal

    def bus_ids(self):
        return [b.id for b in self.buses]

    def validate(self) -> list[str]:
        """Every consistency problem as a list of messages (empty when valid)."""
        problems = []
        ids = self.bus_ids()
        if len(set(ids)) != len(ids):
            problems.append("duplicate bus ids")
        known = set(ids)
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.base_mva > 0:
            problems.append("base_mva must be positive")
        if not self.f_nominal > 0:
            problems.append("f_nominal must be positive")
        if not self.pll_tf > 0:
            problems.append("pll_tf must be positive")
        if not 0 < self.v_min < 1:
            problems.append("v_min must lie in (0, 1)")
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    problems.append(f"branches[{k}]: unknown bus {end}")
        for kind, items in (("machines", self.machines), ("loads", self.loads),
                            ("gf_units", self.gf_units), ("fleet", self.fleet)):
            for k, it in enumerate(items):
                if it.bus not in known:
                    problems.append(f"{kind}[{k}]: unknown bus {it.bus}")
        for kind, items in (("machines", self.machines), ("loads", self.loads), ("gf_units", self.gf_units)):
            seen = [it.id for it in items]
            if len(set(seen)) != len(seen):
                problems.append(f"{kind}: duplicate ids")
        if self.machines and sum(m.slack for m in self.machines) != 1:
            problems.append("exactly one slack machine required")
        return problems

    def check(self):
        problems = self.validate()
        if problems:
            raise ModelError("; ".join(problems))


__all__ = ["Bus", "Branch", "Machine", "Load", "GridFormingUnit", "FleetEntry", "SystemModel",
           "SDD", "CDD", "MODES", "OMEGA_S"]
