"""Discrete side of the discrete-inertia controller.

Quantisation of the virtual power into blocks, staggered evaluation
scheduling, per-bus aggregation, balance monitoring and cycling detection.

A :class:`FleetGroup` is every device at one bus that shares the same virtual
swing parameters. The group integrates one swing equation (its inputs, bus
voltage and angle, are bus-level) while each device keeps its own block count
and evaluation phase. Devices are ranked inside their size class; a device
only covers its own slice of the group's signal, so the group's aggregate is
the nearest multiple of its finest block once every device has evaluated.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dynamics import DDParams, VirtualSwingState, dd_electrical_power
from .errors import InsufficientDataError, ModelError, ParameterError


# --------------------------------------------------------------------------
# quantisation and scheduling
# --------------------------------------------------------------------------

def _nearest_blocks(p, dp):
    """Nearest integer to p/dp with ties rounded up, exact on the given floats."""
    q = np.floor(p / dp + 0.5)
    err = q * dp - p
    # float rounding can only mislead us within a few ulps of a tie
    near = np.abs(np.abs(err) - 0.5 * dp) <= 1e-12 * np.maximum(np.abs(p), dp)
    if np.any(near):
        q = np.array(q, dtype=float, copy=True)
        flat_q, flat_p = q.reshape(-1), np.broadcast_to(p, q.shape).reshape(-1)
        flat_dp = np.broadcast_to(dp, q.shape).reshape(-1)
        for k in np.flatnonzero(near.reshape(-1)):
            ratio = Fraction(float(flat_p[k])) / Fraction(float(flat_dp[k]))
            flat_q[k] = math.floor(ratio + Fraction(1, 2))
        q = flat_q.reshape(q.shape)
    return q


def _blocks_scalar(p: float, dp: float, cap: int) -> int:
    q = math.floor(p / dp + 0.5)
    if abs(abs(q * dp - p) - 0.5 * dp) <= 1e-12 * max(abs(p), dp):
        q = math.floor(Fraction(p) / Fraction(dp) + Fraction(1, 2))
    return 0 if q < 0 else cap if q > cap else int(q)


def discretize_power(p_e, dp, n_blocks):
    """Nearest number of blocks ``h`` in ``0..n_blocks`` approximating ``p_e``.

    Returns ``(h, h*dp)``. Works elementwise on arrays; scalars in give a
    Python ``int`` and ``float`` back.
    """
    if np.any(np.asarray(dp) <= 0):
        raise ParameterError("block size dp must be positive")
    if np.any(np.asarray(n_blocks) < 1):
        raise ParameterError("n_blocks must be at least 1")
    scalar = np.ndim(p_e) == 0 and np.ndim(dp) == 0 and np.ndim(n_blocks) == 0
    if scalar:
        h = _blocks_scalar(float(p_e), float(dp), int(n_blocks))
        return h, h * float(dp)
    p = np.asarray(p_e, dtype=float)
    d = np.asarray(dp, dtype=float)
    h = np.clip(_nearest_blocks(p, d), 0, n_blocks).astype(np.int64)
    return h, h * d


def schedule_evaluations(count: int, dt_eval: float, seed) -> np.ndarray:
    """Evaluation phases, uniform on ``[0, dt_eval)`` and reproducible from ``seed``."""
    if count < 1:
        raise ParameterError("count must be at least 1")
    if not dt_eval > 0:
        raise ParameterError("dt_eval must be positive")
    rng = np.random.default_rng(seed)
    ph = rng.random(count) * dt_eval
    return np.minimum(ph, np.nextafter(dt_eval, 0.0))


# --------------------------------------------------------------------------
# single device
# --------------------------------------------------------------------------

@dataclass
class DDDevice:
    """One discrete device with its own copy of the swing state.

    ``sign`` is +1 for devices that inject (or shed load) and -1 for devices
    that absorb. ``offset`` is the part of the virtual power already covered
    by higher-priority blocks of the same fleet; a standalone device has 0.
    """

    id: int
    bus: int
    params: DDParams
    swing: VirtualSwingState = field(default_factory=VirtualSwingState)
    h: int = 0
    p_tilde: float = 0.0
    next_eval: float | None = None
    sign: int = 1
    offset: float = 0.0

    def __post_init__(self):
        if self.next_eval is None:
            self.next_eval = self.params.phase
        if not 0 <= self.h <= self.params.n_blocks:
            raise ParameterError("h outside 0..n_blocks")
        self.p_tilde = self.h * self.params.dp

    @property
    def injection(self) -> float:
        return self.sign * self.p_tilde


def outside_band(omega, omega_ref, db, omega_bus=None) -> bool:
    """Switching gate: the virtual speed or the measured bus frequency leaves the dead-band.

    The measured frequency matters at start-up: the virtual rotor only moves
    once switched power changes, so with a zero band it would never open.
    """
    if abs(omega - omega_ref) > db:
        return True
    return omega_bus is not None and abs(omega_bus - omega_ref) > db


def evaluate_device(dev: DDDevice, t: float, v: float, theta: float, omega_ref: float = 1.0,
                    tol: float = 1e-9, omega_bus: float | None = None) -> DDDevice:
    """Sample-and-hold update of one device at its evaluation instant.

    Switching is gated by the dead-band (see :func:`outside_band`). The
    device object is updated in place and returned.
    """
    assert t >= dev.next_eval - tol, f"device {dev.id} evaluated at {t} before {dev.next_eval}"
    prm = dev.params
    if outside_band(dev.swing.omega, omega_ref, prm.db, omega_bus):
        p_e = prm.base * dd_electrical_power(dev.swing.delta, theta, v, prm.K_p)
        dev.h, dev.p_tilde = discretize_power(dev.sign * p_e - dev.offset, prm.dp, prm.n_blocks)
    dev.next_eval += prm.dt_eval
    return dev


# --------------------------------------------------------------------------
# fleet groups
# --------------------------------------------------------------------------

@dataclass
class SizeClass:
    dp: float
    n_blocks: int
    sign: int
    count: int


def allocate_blocks(demand: float, classes: list[SizeClass], current=None) -> np.ndarray:
    """Block totals per class approximating ``demand`` (already sign-corrected, pu).

    Classes are filled coarse to fine: every class but the finest takes the
    floor of what remains so that finer blocks can settle the residue; the
    finest rounds to nearest. With ``current`` totals given, a coarse class
    keeps its count while the remainder it leaves lies in ``[0, 2*dp]``; this
    hysteresis stops coarse blocks chattering when the demand hovers at a
    boundary that finer blocks can cover either way. Result entries align
    with ``classes``.
    """
    out = np.zeros(len(classes), dtype=np.int64)
    order = sorted(range(len(classes)), key=lambda k: -classes[k].dp)
    rem = max(demand, 0.0)
    finer_cap = [0.0] * len(order)
    acc = 0.0
    for pos in range(len(order) - 1, -1, -1):
        finer_cap[pos] = acc
        c = classes[order[pos]]
        acc += c.dp * c.count * c.n_blocks
    for pos, k in enumerate(order):
        c = classes[k]
        cap = c.count * c.n_blocks
        last = pos == len(order) - 1
        if cap == 0:
            continue
        if not last and current is not None:
            keep = int(current[k])
            left = rem - keep * c.dp
            if 0.0 <= left <= min(2.0 * c.dp, finer_cap[pos]):
                out[k] = keep
                rem = left
                continue
        target = rem if last else rem - 0.5 * c.dp
        if target < 0.0:
            continue
        kk = _blocks_scalar(target, c.dp, cap)
        out[k] = kk
        rem -= kk * c.dp
    return out


class FleetGroup:
    """All devices at one bus sharing one set of virtual swing parameters."""

    def __init__(self, bus: int, params: DDParams, classes: list[SizeClass],
                 phases: np.ndarray, first_id: int = 0):
        if not classes or sum(c.count for c in classes) < 1:
            raise ParameterError("a fleet group needs at least one device")
        self.bus = bus
        self.params = params
        self.classes = classes
        counts = [c.count for c in classes]
        n = sum(counts)
        if len(phases) != n:
            raise ParameterError("one phase per device required")
        self.count = n
        self.ids = np.arange(first_id, first_id + n, dtype=np.int64)
        self.cls = np.repeat(np.arange(len(classes)), counts)
        self.rank = np.concatenate([np.arange(c) for c in counts]).astype(np.int64)
        self.n_blocks = np.array([c.n_blocks for c in classes], dtype=np.int64)[self.cls]
        self.phase = np.asarray(phases, dtype=float)
        self.h = np.zeros(n, dtype=np.int64)
        self.totals = np.zeros(len(classes), dtype=np.int64)
        self._dp = np.array([c.dp for c in classes])
        self._sign = np.array([c.sign for c in classes], dtype=np.int64)
        self._dirs = {s: [k for k, c in enumerate(classes) if c.sign == s] for s in (1, -1)}

    @property
    def capacity(self) -> float:
        return float(sum(c.dp * c.count * c.n_blocks for c in self.classes))

    def p_tilde(self) -> float:
        """Signed switched power of the group, pu (injection positive)."""
        return float(np.sum(self._sign * self.totals * self._dp))

    def q_tilde(self) -> float:
        return self.p_tilde() * math.tan(self.params.pf_angle)

    def virtual_power(self, delta: float, theta: float, v: float) -> float:
        return self.params.base * float(dd_electrical_power(delta, theta, v, self.params.K_p))

    def allocation(self, p_e: float) -> np.ndarray:
        alloc = np.zeros(len(self.classes), dtype=np.int64)
        for s, ks in self._dirs.items():
            if ks:
                alloc[ks] = allocate_blocks(s * p_e, [self.classes[k] for k in ks], self.totals[ks])
        return alloc

    def evaluate(self, idx: np.ndarray, p_e: float, omega: float, omega_ref: float = 1.0,
                 omega_bus: float | None = None):
        """Evaluate the devices ``idx`` (positions in the group) against ``p_e``.

        Returns ``(positions, h_old, h_new)`` for the devices that switched.
        """
        if idx.size == 0 or not outside_band(omega, omega_ref, self.params.db, omega_bus):
            return idx[:0], idx[:0], idx[:0]
        alloc = self.allocation(p_e)
        h_new = np.clip(alloc[self.cls[idx]] - self.rank[idx] * self.n_blocks[idx], 0, self.n_blocks[idx])
        h_old = self.h[idx]
        changed = h_new != h_old
        if not np.any(changed):
            return idx[:0], idx[:0], idx[:0]
        pos = idx[changed]
        np.add.at(self.totals, self.cls[pos], h_new[changed] - h_old[changed])
        self.h[pos] = h_new[changed]
        return pos, h_old[changed], h_new[changed]

    def device(self, pos: int, swing: VirtualSwingState, next_eval: float) -> DDDevice:
        """Standalone view of one device; its offset encodes its slice of the group."""
        k = int(self.cls[pos])
        c = self.classes[k]
        prm = DDParams(**{**self.params.__dict__, "dp": c.dp, "n_blocks": c.n_blocks,
                          "phase": float(self.phase[pos]) % self.params.dt_eval})
        return DDDevice(id=int(self.ids[pos]), bus=self.bus, params=prm,
                        swing=VirtualSwingState(swing.delta, swing.omega, swing.p_ref),
                        h=int(self.h[pos]), next_eval=next_eval, sign=c.sign)

    def device_offset(self, pos: int, p_e: float) -> float:
        """Power a standalone copy of device ``pos`` must subtract from ``p_e``.

        That is what coarser classes and lower ranks already claim, plus the
        headroom its own class leaves to finer classes at the current totals.
        """
        k = int(self.cls[pos])
        c = self.classes[k]
        ks = self._dirs[c.sign]
        alloc = allocate_blocks(c.sign * p_e, [self.classes[j] for j in ks], self.totals[ks])
        covered = sum(alloc[ks.index(j)] * self.classes[j].dp for j in ks if self.classes[j].dp > c.dp)
        off = covered + self.rank[pos] * c.n_blocks * c.dp
        if any(self.classes[j].dp < c.dp for j in ks):
            off += max(c.sign * p_e, 0.0) - covered - alloc[ks.index(k)] * c.dp
        return float(off)


class Fleet:
    """Collection of fleet groups over a set of buses."""

    def __init__(self, groups: list[FleetGroup], bus_ids):
        self.groups = groups
        self.bus_ids = list(bus_ids)

    @property
    def count(self) -> int:
        return sum(g.count for g in self.groups)

    def groups_at(self, bus):
        return [g for g in self.groups if g.bus == bus]


def aggregate_bus_injection(fleet, bus) -> tuple[float, float]:
    """Switched (P, Q) injection of the devices at ``bus``.

    ``fleet`` is a :class:`Fleet` or an iterable of :class:`DDDevice`.
    Positive P offsets load (or adds generation).
    """
    if isinstance(fleet, Fleet):
        if bus not in fleet.bus_ids:
            raise ModelError(f"unknown bus {bus}")
        p = q = 0.0
        for g in fleet.groups_at(bus):
            pg = g.p_tilde()
            p += pg
            q += pg * math.tan(g.params.pf_angle)
        return p, q
    p = q = 0.0
    for d in fleet:
        if d.bus == bus:
            p += d.injection
            q += d.injection * math.tan(d.params.pf_angle)
    return p, q


def quantization_shortfall(p_e, p_tilde) -> float:
    """Aggregate switching pressure ``sum |p_e - p_tilde|``."""
    return float(np.sum(np.abs(np.asarray(p_e, float) - np.asarray(p_tilde, float))))


# --------------------------------------------------------------------------
# monitoring
# --------------------------------------------------------------------------

@dataclass
class BalanceMonitor:
    """Record of the power-balance tolerance check over a run."""

    epsilon: float
    window: float = 5.0
    t: list = field(default_factory=list)
    imbalance: list = field(default_factory=list)
    buffer: list = field(default_factory=list)
    shortfall: list = field(default_factory=list)

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ParameterError("epsilon must be nonnegative")

    def record(self, t, imbalance, buffer=0.0, shortfall=0.0):
        self.t.append(t)
        self.imbalance.append(imbalance)
        self.buffer.append(buffer)
        self.shortfall.append(shortfall)

    def within_tolerance(self, t0: float, t1: float, which: str = "imbalance") -> bool:
        t = np.asarray(self.t)
        vals = np.abs(np.asarray(getattr(self, which)))
        sel = (t >= t0) & (t <= t1)
        return bool(np.all(vals[sel] <= self.epsilon))


def default_epsilon(dps) -> float:
    """Twice the smallest block present; nothing finer can be corrected by switching."""
    dps = list(dps)
    return 2.0 * min(dps) if dps else 0.0


# --------------------------------------------------------------------------
# cycling
# --------------------------------------------------------------------------

@dataclass
class BusCycling:
    cycling: bool
    period: float = 0.0
    amplitude: float = 0.0
    onset: float | None = None


@dataclass
class CyclingReport:
    buses: dict = field(default_factory=dict)

    @property
    def any(self) -> bool:
        return any(b.cycling for b in self.buses.values())

    def cycling_buses(self):
        return [k for k, b in self.buses.items() if b.cycling]

    def as_dict(self):
        return {str(k): {"cycling": b.cycling, "period": b.period, "amplitude": b.amplitude,
                         "onset": b.onset} for k, b in self.buses.items()}


def _autocorr(x):
    x = x - x.mean()
    n = len(x)
    denom = float(np.dot(x, x))
    if denom == 0.0:
        return np.zeros(n)
    f = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n]
    # unbiased normalisation keeps long lags comparable
    return ac / denom * n / (n - np.arange(n))


def _window_verdict(x, dt_sample, dt_eval, amp_tol, acf_threshold):
    tt = np.arange(len(x))
    # slow drifts are not cycling: judge the detrended signal
    r = x - np.polyval(np.polyfit(tt, x, 1), tt)
    # a fitted trend tilts a periodic signal; take whichever spread is smaller
    amp = 0.5 * min(float(np.percentile(v, 97.5) - np.percentile(v, 2.5)) for v in (x, r))
    if amp <= amp_tol:
        return False, 0.0, amp
    half = len(r) // 2
    # a decaying transient is not cycling
    if 0.5 * np.ptp(r[half:]) < 0.5 * amp:
        return False, 0.0, amp
    ac = _autocorr(r)
    lag0 = max(1, int(round(dt_eval / dt_sample)))
    lag1 = len(r) // 2
    neg = np.flatnonzero(ac[:lag1 + 1] < 0)
    if neg.size == 0:
        return False, 0.0, amp
    # the periodic peak comes after the first zero crossing
    start = max(lag0, int(neg[0]))
    if lag1 <= start:
        return False, 0.0, amp
    seg = ac[start:lag1 + 1]
    k = int(np.argmax(seg))
    if seg[k] >= acf_threshold:
        return True, (start + k) * dt_sample, amp
    return False, 0.0, amp


def detect_cycling(series, dt_sample: float, dt_eval: float = 1.0, amp_tol: float = 0.0,
                   window: float = 10.0, acf_threshold: float = 0.5, t0: float = 0.0) -> CyclingReport:
    """Flag sustained periodic switching per bus.

    ``series`` maps bus id to the aggregate switched power (or block count)
    sampled every ``dt_sample`` seconds starting at ``t0``. A bus is cycling
    when, over the trailing ``window``, the half peak-to-peak amplitude
    exceeds ``amp_tol``, does not decay, and the autocorrelation has a peak of
    at least ``acf_threshold`` at a lag of one evaluation interval or more.
    """
    report = CyclingReport()
    need = int(math.ceil(10 * dt_eval / dt_sample))
    nwin = max(int(round(window / dt_sample)), need)
    for bus, s in series.items():
        x = np.asarray(s, float)
        if len(x) < need:
            raise InsufficientDataError(
                f"bus {bus}: {len(x)} samples, need at least {need} (10 evaluation intervals)")
        tail = x[-nwin:]
        verdict, period, amp = _window_verdict(tail, dt_sample, dt_eval, amp_tol, acf_threshold)
        onset = None
        if verdict:
            # walk back in half-window steps while the verdict holds
            start = len(x) - len(tail)
            step = max(len(tail) // 2, 1)
            while start - step >= 0:
                ok, _, _ = _window_verdict(x[start - step:start - step + len(tail)], dt_sample,
                                           dt_eval, amp_tol, acf_threshold)
                if not ok:
                    break
                start -= step
            onset = t0 + start * dt_sample
        report.buses[bus] = BusCycling(verdict, period, amp, onset)
    return report


# --------------------------------------------------------------------------
# switch log
# --------------------------------------------------------------------------

class SwitchLog:
    """Append-only record of device switchings."""

    columns = ("t", "device_id", "bus", "h_old", "h_new")

    def __init__(self):
        self._t, self._id, self._bus, self._old, self._new = [], [], [], [], []

    def extend(self, t, ids, bus, h_old, h_new):
        n = len(ids)
        if n == 0:
            return
        self._t.append(np.full(n, t))
        self._id.append(np.asarray(ids))
        self._bus.append(np.full(n, bus))
        self._old.append(np.asarray(h_old))
        self._new.append(np.asarray(h_new))

    def __len__(self):
        return int(sum(len(a) for a in self._t))

    def arrays(self):
        if not self._t:
            e = np.zeros(0)
            return e, e.astype(np.int64), e.astype(np.int64), e.astype(np.int64), e.astype(np.int64)
        return (np.concatenate(self._t), np.concatenate(self._id), np.concatenate(self._bus),
                np.concatenate(self._old), np.concatenate(self._new))

    def to_csv(self, path):
        t, ids, bus, old, new = self.arrays()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in zip(t, ids, bus, old, new):
                w.writerow((repr(float(row[0])), int(row[1]), int(row[2]), int(row[3]), int(row[4])))


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

def _swing_key(p: DDParams):
    return (p.M, p.D, p.R, p.K_p, p.db, p.dt_eval, p.pf_angle, p.base)


def build_fleet(entries, bus_ids, seed) -> Fleet:
    """Group fleet entries by (bus, swing parameters) and draw evaluation phases.

    Each entry gets its own child generator spawned from ``seed`` so adding an
    entry does not reshuffle the phases of the others.
    """
    entries = list(entries)
    children = np.random.SeedSequence(seed).spawn(len(entries)) if entries else []
    buckets: dict = {}
    for ent, ss in zip(entries, children):
        if ent.count == 0:
            continue
        if ent.bus not in bus_ids:
            raise ModelError(f"fleet entry at unknown bus {ent.bus}")
        phases = schedule_evaluations(ent.count, ent.params.dt_eval, ss)
        key = (ent.bus, _swing_key(ent.params))
        buckets.setdefault(key, (ent.params, []))[1].append((ent, phases))
    groups = []
    next_id = 0
    for (bus, _), (params, items) in buckets.items():
        classes = [SizeClass(e.dp, e.n_blocks, e.direction, e.count) for e, _ in items]
        phases = np.concatenate([ph for _, ph in items])
        g = FleetGroup(bus, params, classes, phases, first_id=next_id)
        next_id += g.count
        groups.append(g)
    return Fleet(groups, bus_ids)
