"""Scenario definitions: the built-in WSCC 9-bus cases, a YAML file format and
run summaries."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .dynamics import DDParams
from .errors import InsufficientDataError, ModelError, ParameterError, ScenarioError
from .fleet import CyclingReport, default_epsilon, detect_cycling
from .integrator import EVENT_KINDS, Event, StepControl, TimeSeries, simulate
from .model import CDD, MODES, SDD, Branch, Bus, FleetEntry, GridFormingUnit, Load, Machine, SystemModel

SCHEMA_VERSION = 1

FINE_SIZES = (1e-2, 1e-3, 1e-4, 1e-5)
MACHINE_DAMPING = 2.0
# grid-following devices need stiffer droop when machines already hold the frequency
CDD_DD_PARAMS = {"K_p": 5.0, "R": 0.002}


@dataclass
class Scenario:
    model: SystemModel
    events: list = field(default_factory=list)
    control: StepControl = field(default_factory=StepControl)
    t_end: float = 40.0
    seed: int = 0
    name: str = "custom"
    epsilon: float | None = None

    @property
    def mode(self):
        return self.model.mode

    @property
    def fleet_spec(self):
        return self.model.fleet

    @property
    def dd_count(self) -> int:
        return sum(e.count for e in self.model.fleet)

    def balance_epsilon(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return default_epsilon(e.dp for e in self.model.fleet if e.count)

    def run(self, **kw) -> TimeSeries:
        return simulate(self.model, self.events, self.control, self.t_end, self.seed,
                        epsilon=self.balance_epsilon(), **kw)


# --------------------------------------------------------------------------
# WSCC 9-bus
# --------------------------------------------------------------------------

# from, to, r, x, total charging b
_WSCC_BRANCHES = [
    (1, 4, 0.0, 0.0576, 0.0),
    (4, 6, 0.017, 0.092, 0.158),
    (6, 9, 0.039, 0.17, 0.358),
    (3, 9, 0.0, 0.0586, 0.0),
    (8, 9, 0.0119, 0.1008, 0.209),
    (7, 8, 0.0085, 0.072, 0.149),
    (7, 2, 0.0, 0.0625, 0.0),
    (5, 7, 0.032, 0.161, 0.306),
    (4, 5, 0.01, 0.085, 0.176),
]
_WSCC_KV = {1: 16.5, 2: 18.0, 3: 13.8}
# bus, P, v_set, H (s), x'_d (pu on 100 MVA)
_WSCC_GENS = [(1, 0.0, 1.04, 23.64, 0.0608), (2, 1.63, 1.025, 6.4, 0.1198), (3, 0.85, 1.025, 3.01, 0.1813)]


def wscc9_network():
    buses = [Bus(i, _WSCC_KV.get(i, 230.0)) for i in range(1, 10)]
    branches = [Branch(f, t, r, x, b / 2.0) for f, t, r, x, b in _WSCC_BRANCHES]
    return buses, branches


def _fleet_entries(dd_count, sizes, buses, params):
    """Deterministic round-robin over sizes, then buses, then direction."""
    if dd_count < 0:
        raise ParameterError("dd_count must be nonnegative")
    if dd_count == 0:
        return []
    j = np.arange(dd_count)
    ns, nb = len(sizes), len(buses)
    key = ((j // (ns * nb)) % 2) * ns * nb + ((j // ns) % nb) * ns + (j % ns)
    counts = np.bincount(key, minlength=2 * ns * nb)
    out = []
    for d, direction in enumerate((1, -1)):
        for bi, bus in enumerate(buses):
            for si, dp in enumerate(sizes):
                c = int(counts[d * ns * nb + bi * ns + si])
                if c:
                    out.append(FleetEntry(bus, dp, c, 1, direction, params))
    return out


def wscc9_builtin(mode: str = SDD, dd_count: int = 30000, seed: int = 0, sizes=FINE_SIZES,
                  dd_params: dict | None = None, t_end: float | None = None,
                  events: bool = True) -> Scenario:
    """Modified WSCC 9-bus system.

    SDD: machines are constant PQ, a grid-forming buffer at the generator
    buses sets the frequency and the device fleet does all balancing; a
    1.1 pu load trip at 15 s, a resistive fault at bus 5 from 20 to 22 s and
    reconnection of the load at 35 s.

    CDD: machines are dynamic with droop governors, devices assist; 7% of
    the load (0.273 pu at bus 8) is disconnected at 10 s.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    buses, branches = wscc9_network()
    # light mechanical damping keeps the classical inter-machine modes from ringing on switching noise
    machines = [Machine(k + 1, b, p, vs, slack=(k == 0), H=H, D=MACHINE_DAMPING, x_d=xd)
                for k, (b, p, vs, H, xd) in enumerate(_WSCC_GENS)]
    if mode == SDD:
        loads = [Load(1, 5, 1.1, 0.275), Load(2, 5, 0.3, 0.075), Load(3, 5, 0.6, 0.15),
                 Load(4, 6, 0.9, 0.3), Load(5, 8, 1.0, 0.35)]
        gf = [GridFormingUnit(k + 1, b, H=30.0, S=2.0, D=50.0) for k, b in enumerate((1, 2, 3))]
        overrides = {"db": 0.0}
        evs = [Event(15.0, "load_off", 1), Event(20.0, "fault_apply", 5, (1e-3,)),
               Event(22.0, "fault_clear", 5), Event(35.0, "load_on", 1)]
        horizon = 45.0
    else:
        trip = round(0.07 * 3.9, 6)
        loads = [Load(1, 5, 1.1, 0.275), Load(2, 5, 0.3, 0.075), Load(3, 5, 0.6, 0.15),
                 Load(4, 6, 0.9, 0.3), Load(5, 8, 1.0 - trip, 0.35 * (1.0 - trip)), Load(6, 8, trip, 0.35 * trip)]
        gf = []
        overrides = dict(CDD_DD_PARAMS)
        evs = [Event(10.0, "load_off", 6)]
        horizon = 40.0
    overrides.update(dd_params or {})
    params = DDParams(**overrides)
    fleet = _fleet_entries(dd_count, tuple(sizes), [b.id for b in buses], params)
    model = SystemModel(buses, branches, machines, loads, gf, fleet, mode=mode)
    name = f"wscc9-{mode.lower()}"
    return Scenario(model, evs if events else [], StepControl(), horizon if t_end is None else t_end, seed, name)


BUILTINS = {"wscc9-sdd": SDD, "wscc9-cdd": CDD}


def builtin(name: str, **kw) -> Scenario:
    if name not in BUILTINS:
        raise ScenarioError(f"unknown built-in scenario {name!r}; choose from {sorted(BUILTINS)}")
    return wscc9_builtin(BUILTINS[name], **kw)


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

_DD_FIELDS = [f.name for f in dataclasses.fields(DDParams) if f.name not in ("dp", "n_blocks", "phase")]
_SECTIONS = {
    "schema_version", "name", "system", "buses", "branches", "machines", "loads", "gf_units",
    "fleet", "events", "control", "run",
}
_SPECS = {
    "system": ({"base_mva", "f_nominal", "mode", "pll_tf", "v_min"}, {"base_mva"}),
    "buses": ({"id", "base_kv", "shunt_g", "shunt_b"}, {"id"}),
    "branches": ({"from", "to", "r", "x", "b_half", "tap", "status"}, {"from", "to", "x"}),
    "machines": ({"id", "bus", "p_set", "v_set", "slack", "H", "D", "x_d", "R", "T_gov"}, {"id", "bus"}),
    "loads": ({"id", "bus", "p", "q", "status"}, {"id", "bus", "p"}),
    "gf_units": ({"id", "bus", "H", "S", "x", "D"}, {"id", "bus"}),
    "fleet": ({"bus", "dp", "count", "n_blocks", "direction", "params"}, {"bus", "dp", "count"}),
    "events": ({"t", "kind", "target", "payload"}, {"t", "kind", "target"}),
    "control": ({"h_step", "newton_tol", "max_newton", "tick"}, set()),
    "run": ({"t_end", "seed", "epsilon"}, set()),
}


def scenario_to_dict(sc: Scenario) -> dict:
    m = sc.model

    def dd(p: DDParams):
        return {k: getattr(p, k) for k in _DD_FIELDS}

    return {
        "schema_version": SCHEMA_VERSION,
        "name": sc.name,
        "system": {"base_mva": m.base_mva, "f_nominal": m.f_nominal, "mode": m.mode,
                   "pll_tf": m.pll_tf, "v_min": m.v_min},
        "buses": [{"id": b.id, "base_kv": b.base_kv, "shunt_g": b.shunt_g, "shunt_b": b.shunt_b}
                  for b in m.buses],
        "branches": [{"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b_half": br.b_half,
                      "tap": br.tap, "status": br.status} for br in m.branches],
        "machines": [dataclasses.asdict(x) for x in m.machines],
        "loads": [dataclasses.asdict(x) for x in m.loads],
        "gf_units": [dataclasses.asdict(x) for x in m.gf_units],
        "fleet": [{"bus": e.bus, "dp": e.dp, "count": e.count, "n_blocks": e.n_blocks,
                   "direction": e.direction, "params": dd(e.params)} for e in m.fleet],
        "events": [{"t": e.t, "kind": e.kind, "target": e.target, "payload": list(e.payload)}
                   for e in sc.events],
        "control": dataclasses.asdict(sc.control),
        "run": {"t_end": sc.t_end, "seed": sc.seed, "epsilon": sc.epsilon},
    }


def dump_scenario(sc: Scenario, path=None) -> str:
    text = yaml.safe_dump(scenario_to_dict(sc), sort_keys=False)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_items(section, items, problems):
    allowed, required = _SPECS[section]
    if not isinstance(items, list):
        problems.append(f"{section}: expected a list")
        return []
    ok = []
    for k, it in enumerate(items):
        where = f"{section}[{k}]"
        if not isinstance(it, dict):
            problems.append(f"{where}: expected a mapping")
            continue
        bad = False
        for key in sorted(set(it) - allowed):
            problems.append(f"{where}.{key}: unknown key")
            bad = True
        for key in sorted(required - set(it)):
            problems.append(f"{where}.{key}: missing")
            bad = True
        if not bad:
            ok.append((where, it))
    return ok


def scenario_from_dict(doc) -> Scenario:
    """Validate and build a scenario; every problem found is reported at once."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ScenarioError("top level must be a mapping")
    for key in sorted(set(doc) - _SECTIONS):
        problems.append(f"{key}: unknown section")
    if doc.get("schema_version") != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    system = doc.get("system")
    if not isinstance(system, dict):
        problems.append("system: missing section (base_mva is required)")
        system = {}
    else:
        for key in sorted(set(system) - _SPECS["system"][0]):
            problems.append(f"system.{key}: unknown key")
        if "base_mva" not in system:
            problems.append("system.base_mva: missing")
        elif not _num(system["base_mva"]) or system["base_mva"] <= 0:
            problems.append("system.base_mva: must be a positive number")
        if system.get("mode", SDD) not in MODES:
            problems.append(f"system.mode: must be one of {list(MODES)}")

    def build(section, make):
        out = []
        for where, it in _check_items(section, doc.get(section, []) or [], problems):
            try:
                out.append(make(it))
            except (TypeError, ValueError, ParameterError) as exc:
                problems.append(f"{where}: {exc}")
        return out

    buses = build("buses", lambda d: Bus(int(d["id"]), float(d.get("base_kv", 1.0)),
                                         shunt_g=float(d.get("shunt_g", 0.0)), shunt_b=float(d.get("shunt_b", 0.0))))
    if not buses:
        problems.append("buses: at least one bus required")
    branches = build("branches", lambda d: Branch(int(d["from"]), int(d["to"]), float(d.get("r", 0.0)),
                                                  float(d["x"]), float(d.get("b_half", 0.0)),
                                                  float(d.get("tap", 1.0)), bool(d.get("status", True))))
    machines = build("machines", lambda d: Machine(**d))
    loads = build("loads", lambda d: Load(**d))
    gf = build("gf_units", lambda d: GridFormingUnit(**d))

    def make_entry(d):
        prm = d.get("params", {}) or {}
        unknown = set(prm) - set(_DD_FIELDS)
        if unknown:
            raise ValueError(f"params: unknown keys {sorted(unknown)}")
        if not _num(d["dp"]) or d["dp"] <= 0:
            raise ValueError("dp must be a positive number")
        if not isinstance(d["count"], int) or d["count"] < 0:
            raise ValueError("count must be a nonnegative integer")
        return FleetEntry(int(d["bus"]), float(d["dp"]), int(d["count"]), int(d.get("n_blocks", 1)),
                          int(d.get("direction", 1)), DDParams(**prm))

    fleet = build("fleet", make_entry)

    def make_event(d):
        if not _num(d["t"]) or d["t"] < 0:
            raise ValueError(f"time must be a nonnegative number, got {d['t']!r}")
        if d["kind"] not in EVENT_KINDS:
            raise ValueError(f"kind must be one of {list(EVENT_KINDS)}")
        return Event(float(d["t"]), d["kind"], int(d["target"]), tuple(float(p) for p in d.get("payload", []) or []))

    events = build("events", make_event)

    control = StepControl()
    ctl = doc.get("control", {}) or {}
    for key in sorted(set(ctl) - _SPECS["control"][0]):
        problems.append(f"control.{key}: unknown key")
    try:
        control = StepControl(**{k: v for k, v in ctl.items() if k in _SPECS["control"][0]})
    except (TypeError, ParameterError) as exc:
        problems.append(f"control: {exc}")
    run = doc.get("run", {}) or {}
    for key in sorted(set(run) - _SPECS["run"][0]):
        problems.append(f"run.{key}: unknown key")
    t_end = run.get("t_end", 40.0)
    if not _num(t_end) or t_end <= 0:
        problems.append("run.t_end: must be positive")
    seed = run.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.append("run.seed: must be a nonnegative integer")
    eps = run.get("epsilon")
    if eps is not None and (not _num(eps) or eps < 0):
        problems.append("run.epsilon: must be nonnegative")

    if problems:
        raise ScenarioError(problems)
    model = SystemModel(buses, branches, machines, loads, gf, fleet, mode=system.get("mode", SDD),
                        base_mva=float(system["base_mva"]), f_nominal=float(system.get("f_nominal", 60.0)),
                        pll_tf=float(system.get("pll_tf", 0.05)), v_min=float(system.get("v_min", 0.7)))
    problems = [f"model: {p}" for p in model.validate()]
    bus_ids = set(model.bus_ids())
    load_ids = {ld.id for ld in loads}
    for k, ev in enumerate(events):
        known = bus_ids if ev.kind.startswith("fault") else load_ids
        if ev.target not in known:
            problems.append(f"events[{k}].target: unknown {'bus' if ev.kind.startswith('fault') else 'load'} {ev.target}")
    if problems:
        raise ScenarioError(problems)
    return Scenario(model, events, control, float(t_end), seed, str(doc.get("name", "custom")),
                    None if eps is None else float(eps))


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ScenarioError(f"{path}: {where}{getattr(exc, 'problem', exc)}") from exc
    return scenario_from_dict(doc)


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------

SETTLE_BAND = 2e-4
SETTLE_HOLD = 5.0
ROCOF_WINDOW = 0.5
DRIFT_RATE = 1e-4


@dataclass
class RunSummary:
    freq_nadir: float
    freq_zenith: float
    max_rocof: float
    settle_time: float
    max_imbalance: float
    cycling: CyclingReport
    switch_count: int
    freq_drift: bool = False
    final_rocof: float = 0.0
    max_buffer: float = 0.0
    epsilon: float = 0.0
    scenario: str = ""
    dd_count: int = 0
    failure: dict | None = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("scenario", "dd_count", "freq_nadir", "freq_zenith", "max_rocof",
                                           "settle_time", "max_imbalance", "max_buffer", "epsilon",
                                           "switch_count", "freq_drift", "final_rocof")}
        d["cycling"] = self.cycling.as_dict()
        d["cycling_buses"] = self.cycling.cycling_buses()
        d["failure"] = self.failure
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}

    def to_text(self) -> str:
        st = "never" if math.isinf(self.settle_time) else f"{self.settle_time:.3f} s"
        lines = [
            f"scenario        {self.scenario} ({self.dd_count} devices)",
            f"freq nadir      {self.freq_nadir:.6f} pu",
            f"freq zenith     {self.freq_zenith:.6f} pu",
            f"max RoCoF       {self.max_rocof:.6f} pu/s",
            f"settle time     {st}",
            f"max imbalance   {self.max_imbalance:.3e} pu (epsilon {self.epsilon:.1e})",
            f"max buffer      {self.max_buffer:.4f} pu",
            f"switchings      {self.switch_count}",
            f"cycling buses   {self.cycling.cycling_buses() or 'none'}",
        ]
        if self.freq_drift:
            lines.append(f"WARNING: unbounded frequency drift ({self.final_rocof:.2e} pu/s at end of run)")
        if self.failure:
            lines.append(f"FAILED at t={self.failure.get('t')}: {self.failure.get('message')}")
        return "\n".join(lines) + "\n"


def centered_rocof(f: np.ndarray, dt: float, window: float = ROCOF_WINDOW) -> np.ndarray:
    """Centered difference over ``window`` seconds along the first axis."""
    k = int(round(window / (2 * dt)))
    if f.shape[0] < 2 * k + 1 or k < 1:
        raise InsufficientDataError("series shorter than the RoCoF window")
    return (f[2 * k:] - f[:-2 * k]) / (2 * k * dt)


def settle_time(t: np.ndarray, f: np.ndarray, t_from: float, band: float = SETTLE_BAND,
                hold: float = SETTLE_HOLD) -> float:
    """Seconds after ``t_from`` until every column of ``f`` stays within ``band`` of 1 for ``hold`` s."""
    inside = np.all(np.abs(f - 1.0) < band, axis=1) if f.ndim == 2 else np.abs(f - 1.0) < band
    sel = np.flatnonzero(t >= t_from - 1e-9)
    start = None
    for k in sel:
        if inside[k]:
            if start is None:
                start = k
            if t[k] - t[start] >= hold - 1e-9:
                return float(t[start] - t_from)
        else:
            start = None
    return math.inf


def _drifting(fm, slope) -> bool:
    """Frequency outside the settle band at the end and still moving away."""
    dev = float(fm[-1] - 1.0)
    return abs(slope) > DRIFT_RATE and abs(dev) > SETTLE_BAND and slope * dev > 0


def summarize(ts: TimeSeries, scenario: Scenario | None = None, window: float = 10.0) -> RunSummary:
    t = ts.t
    if len(t) < 3:
        raise InsufficientDataError("time series too short to summarise")
    dt = float(t[1] - t[0])
    f = ts.freq()
    rocof = centered_rocof(f, dt)
    t_last = max(ts.event_times) if ts.event_times else 0.0
    st = settle_time(t, f, t_last)
    fm = f.mean(axis=1)
    n_tail = int(round(5.0 / dt))
    if len(t) > n_tail + 1:
        slope = float(np.polyfit(t[-n_tail:], fm[-n_tail:], 1)[0])
    else:
        slope = 0.0
    eps = scenario.balance_epsilon() if scenario is not None else ts.monitor.epsilon
    pdd = ts.dd_power()
    series = {b: pdd[:, k] for k, b in enumerate(ts.bus_ids)}
    try:
        cyc = detect_cycling(series, dt, ts.dt_eval, eps, window=window, t0=float(t[0]))
    except InsufficientDataError:
        cyc = CyclingReport()
    return RunSummary(
        freq_nadir=float(f.min()), freq_zenith=float(f.max()), max_rocof=float(np.max(np.abs(rocof))),
        settle_time=st, max_imbalance=float(np.max(np.abs(ts.col("imbalance")))), cycling=cyc,
        switch_count=len(ts.switches), freq_drift=_drifting(fm, slope), final_rocof=slope,
        max_buffer=float(np.max(np.abs(ts.col("gf_power")))), epsilon=eps,
        scenario=scenario.name if scenario is not None else "", dd_count=scenario.dd_count if scenario else 0,
        failure=ts.failure)


def summary_json(summary: RunSummary) -> str:
    return json.dumps(summary.to_dict(), indent=2, sort_keys=True)
