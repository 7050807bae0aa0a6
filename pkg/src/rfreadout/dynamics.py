"""Stochastic (Er ion, trap) dynamics within a measurement cycle.

The joint state is (Er ground/excited) x (trap neutral/ionized).  Clocks:

* excitation, rate ``Gamma_ex * P`` while resonant light is on and Er is
  in the ground state;
* relaxation, rate ``1 / tau_ex`` while excited; it ionizes a neutral
  trap with probability ``eta`` and is benign otherwise;
* background ionization, rate ``Gamma_bg * P`` while any light is on and
  the trap is neutral;
* reset, rate ``1 / tau_reset`` while the trap is ionized.

Rates are piecewise constant in time (light on/off), so the direct
method is exact when waiting times that overrun a segment boundary are
redrawn from the boundary.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from .seeding import STAGE_DYNAMICS, STAGE_SCREEN, seed_fanout, seed_fanout_array

EXCITE = "excite"
RELAX_BENIGN = "relax_benign"
RELAX_IONIZE = "relax_ionize"
BACKGROUND_IONIZE = "background_ionize"
RESET = "reset"
TRANSITIONS = (EXCITE, RELAX_BENIGN, RELAX_IONIZE, BACKGROUND_IONIZE, RESET)
IONIZING = (RELAX_IONIZE, BACKGROUND_IONIZE)

REF_POWER_MW = 7.6
REF_PULSE_LENGTH = 100e-9
REF_PULSE_ARRIVAL = 30e-9
REF_TAU_RESET = 70.9e-6
REF_TAU_EX_ER2 = 492e-9
PLACEHOLDER_TAU_EX_ER1 = 30e-9  # only bounded (< 50 ns) by the measurement
REF_PROBABILITY = {"er1": 6e-4, "er2": 3e-4, "control": 6e-5}
REF_EVENT_COUNTS = {"er1": 594, "er2": 2280, "control": 294}


@dataclass(frozen=True)
class PhotophysicsParams:
    excitation_rate_per_power: float = 0.0  # 1/(s mW)
    excited_lifetime: float = REF_TAU_EX_ER2
    ionization_branching: float = 0.2
    background_rate_per_power: float = 0.0  # 1/(s mW)
    reset_time_constant: float = REF_TAU_RESET

    def __post_init__(self):
        if self.excitation_rate_per_power < 0 or self.background_rate_per_power < 0:
            raise ValueError("rates must be non-negative")
        if not 0 <= self.ionization_branching <= 1:
            raise ValueError("ionization_branching must lie in [0, 1]")
        if not self.excited_lifetime > 0 or not self.reset_time_constant > 0:
            raise ValueError("time constants must be positive")


@dataclass(frozen=True)
class PulseSchedule:
    pulse_start: float = REF_PULSE_ARRIVAL
    pulse_length: float = REF_PULSE_LENGTH
    power: float = REF_POWER_MW
    resonant: bool = True
    cycle_length: float = 20e-6

    def __post_init__(self):
        if self.power < 0:
            raise ValueError("power must be non-negative")
        if self.pulse_start < 0 or self.pulse_length < 0:
            raise ValueError("pulse timing must be non-negative")
        if self.pulse_start + self.pulse_length > self.cycle_length * (1 + 1e-12):
            raise ValueError("pulse does not fit within the cycle")

    @property
    def pulse_end(self) -> float:
        return self.pulse_start + self.pulse_length

    @property
    def energy(self) -> float:
        """Pulse energy in mW*s."""
        return self.power * self.pulse_length


@dataclass
class EventTimeline:
    times: list[float] = field(default_factory=list)
    transitions: list[str] = field(default_factory=list)
    cycle_id: int = 0

    def __len__(self):
        return len(self.times)

    def append(self, t: float, transition: str) -> None:
        self.times.append(t)
        self.transitions.append(transition)

    def ionization_times(self) -> list[float]:
        return [t for t, tr in zip(self.times, self.transitions) if tr in IONIZING]

    def first_ionization(self) -> float | None:
        for t, tr in zip(self.times, self.transitions):
            if tr in IONIZING:
                return t
        return None

    def ionized_intervals(self) -> list[tuple[float, float | None]]:
        """(ionize, reset) pairs; reset is None if still ionized at cycle end."""
        out, start = [], None
        for t, tr in zip(self.times, self.transitions):
            if tr in IONIZING:
                start = t
            elif tr == RESET:
                out.append((start, t))
                start = None
        if start is not None:
            out.append((start, None))
        return out

    def validate(self) -> None:
        """Raise ValueError if the transition sequence is not legal."""
        excited = ionized = False
        prev = -math.inf
        for t, tr in zip(self.times, self.transitions):
            if not t > prev:
                raise ValueError("times must be strictly increasing")
            prev = t
            if tr == EXCITE:
                if excited:
                    raise ValueError("excitation while excited")
                excited = True
            elif tr in (RELAX_BENIGN, RELAX_IONIZE):
                if not excited:
                    raise ValueError("relaxation from the ground state")
                if tr == RELAX_IONIZE and ionized:
                    raise ValueError("ionization of an ionized trap")
                excited = False
                ionized = ionized or tr == RELAX_IONIZE
            elif tr == BACKGROUND_IONIZE:
                if ionized:
                    raise ValueError("ionization of an ionized trap")
                ionized = True
            elif tr == RESET:
                if not ionized:
                    raise ValueError("reset of a neutral trap")
                ionized = False
            else:
                raise ValueError(f"unknown transition {tr!r}")


# --------------------------------------------------------------------------
# simulation


def _rates(s: PulseSchedule, p: PhotophysicsParams):
    k_ex = p.excitation_rate_per_power * s.power if s.resonant else 0.0
    k_bg = p.background_rate_per_power * s.power
    return k_ex, k_bg


def _segments(s: PulseSchedule):
    """(start, end, light_on) spans covering the cycle."""
    segs = []
    if s.pulse_start > 0:
        segs.append((0.0, s.pulse_start, False))
    if s.pulse_length > 0:
        segs.append((s.pulse_start, s.pulse_end, True))
    if s.pulse_end < s.cycle_length:
        segs.append((s.pulse_end, s.cycle_length, False))
    return segs


def _run(tl: EventTimeline, t: float, excited: bool, ionized: bool,
         s: PulseSchedule, p: PhotophysicsParams, rng: np.random.Generator) -> EventTimeline:
    k_ex, k_bg = _rates(s, p)
    k_relax = 1.0 / p.excited_lifetime
    k_reset = 1.0 / p.reset_time_constant
    eta = p.ionization_branching
    for seg_start, seg_end, light in _segments(s):
        if seg_end <= t:
            continue
        t = max(t, seg_start)
        while True:
            r_ex = k_ex if (light and not excited) else 0.0
            r_relax = k_relax if excited else 0.0
            r_bg = k_bg if (light and not ionized) else 0.0
            r_reset = k_reset if ionized else 0.0
            total = r_ex + r_relax + r_bg + r_reset
            if total <= 0:
                break
            t_next = t + rng.exponential(1.0 / total)
            if t_next >= seg_end:
                break
            t = t_next
            u = rng.random() * total
            if u < r_ex:
                excited = True
                tl.append(t, EXCITE)
            elif u < r_ex + r_relax:
                excited = False
                if not ionized and rng.random() < eta:
                    ionized = True
                    tl.append(t, RELAX_IONIZE)
                else:
                    tl.append(t, RELAX_BENIGN)
            elif u < r_ex + r_relax + r_bg:
                ionized = True
                tl.append(t, BACKGROUND_IONIZE)
            else:
                ionized = False
                tl.append(t, RESET)
    return tl


def simulate_cycle(s: PulseSchedule, p: PhotophysicsParams, seed=None,
                   cycle_id: int = 0) -> EventTimeline:
    """Exact event-driven simulation of one cycle starting from (ground, neutral).

    `seed` may be an int or an existing ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _run(EventTimeline(cycle_id=cycle_id), 0.0, False, False, s, p, rng)


def _active_probability(s: PulseSchedule, p: PhotophysicsParams) -> tuple[float, float, float]:
    k_ex, k_bg = _rates(s, p)
    k0 = k_ex + k_bg
    return -math.expm1(-k0 * s.pulse_length), k_ex, k_bg


def _run_active(s: PulseSchedule, p: PhotophysicsParams, rng: np.random.Generator,
                cycle_id: int) -> EventTimeline:
    """Simulate a cycle conditioned on leaving the idle state during the pulse."""
    p_act, k_ex, k_bg = _active_probability(s, p)
    k0 = k_ex + k_bg
    # truncated exponential on [0, pulse_length)
    t = s.pulse_start - math.log1p(-rng.random() * p_act) / k0
    t = min(t, math.nextafter(s.pulse_end, -math.inf))
    tl = EventTimeline(cycle_id=cycle_id)
    if rng.random() * k0 < k_ex:
        tl.append(t, EXCITE)
        return _run(tl, t, True, False, s, p, rng)
    tl.append(t, BACKGROUND_IONIZE)
    return _run(tl, t, False, True, s, p, rng)


def simulate_campaign(s: PulseSchedule, p: PhotophysicsParams, n_cycles: int, seed: int,
                      chunk: int = 1 << 20, first_cycle: int = 0) -> list[EventTimeline]:
    """Simulate `n_cycles` independent cycles; return only non-empty timelines.

    Cycles that stay idle through the pulse are screened out in bulk: from
    (ground, neutral) nothing can happen outside the pulse, so a cycle is
    empty exactly when its first idle-exit time exceeds the pulse length.
    The remaining cycles are simulated individually with their own
    fanned-out seed, conditioned on an exit inside the pulse.
    """
    p_act, _, _ = _active_probability(s, p)
    out: list[EventTimeline] = []
    if p_act <= 0 or n_cycles <= 0:
        return out
    stop = first_cycle + n_cycles
    c0 = (first_cycle // chunk) * chunk
    while c0 < stop:
        rng = np.random.default_rng(seed_fanout(seed, STAGE_SCREEN, c0 // chunk))
        u = rng.random(chunk)
        ids = c0 + np.nonzero(u < p_act)[0]
        ids = ids[(ids >= first_cycle) & (ids < stop)]
        if ids.size:
            seeds = seed_fanout_array(seed, STAGE_DYNAMICS, ids)
            for cid, sd in zip(ids.tolist(), seeds.tolist()):
                out.append(_run_active(s, p, np.random.default_rng(sd), cid))
        c0 += chunk
    return out


# --------------------------------------------------------------------------
# analytic companion


def ionization_probability(s: PulseSchedule, p: PhotophysicsParams) -> float:
    """Probability of at least one ionization per cycle.

    Ionization is made absorbing in the (ground-neutral, excited-neutral,
    ionized) generator, which is propagated across the pulse with a
    matrix exponential; excited population left at pulse end ionizes
    with probability ``eta (1 - exp(-t_rest / tau_ex))`` in the dark.
    """
    k_ex, k_bg = _rates(s, p)
    k_r = 1.0 / p.excited_lifetime
    eta = p.ionization_branching
    # columns sum to zero; state order (g, e, I)
    Q = np.array([
        [-(k_ex + k_bg), (1 - eta) * k_r, 0.0],
        [k_ex, -(k_r + k_bg), 0.0],
        [k_bg, eta * k_r + k_bg, 0.0],
    ])
    x = expm(Q * s.pulse_length) @ np.array([1.0, 0.0, 0.0])
    rest = s.cycle_length - s.pulse_end
    prob = x[2] + x[1] * eta * -math.expm1(-rest * k_r)
    return float(min(max(prob, 0.0), 1.0))


def calibrate_excitation_rate(s: PulseSchedule, p: PhotophysicsParams, target: float) -> float:
    """Excitation rate per mW giving per-cycle ionization probability `target`."""
    from dataclasses import replace

    base = ionization_probability(s, replace(p, excitation_rate_per_power=0.0))
    if target < base:
        raise ValueError(f"target {target} below background-only probability {base}")

    def f(g):
        return ionization_probability(s, replace(p, excitation_rate_per_power=g)) - target

    hi = 1.0
    while f(hi) < 0:
        hi *= 10
        if hi > 1e20:
            raise ValueError("target probability unreachable")
    return brentq(f, 0.0, hi, xtol=1e-12 * hi, rtol=1e-13)


def background_rate_for(s: PulseSchedule, probability: float) -> float:
    """Background rate per mW giving `probability` during the pulse."""
    return -math.log1p(-probability) / (s.power * s.pulse_length)


# --------------------------------------------------------------------------
# statistics and records


def survival_counts(timelines: Sequence[EventTimeline], grid) -> np.ndarray:
    """Number of timelines whose first ionization is later than each grid time."""
    grid = np.asarray(grid, float)
    if len(timelines) == 0:
        return np.zeros(0, dtype=int)
    firsts = []
    for tl in timelines:
        t = tl.first_ionization()
        if t is None:
            raise ValueError(f"timeline {tl.cycle_id} has no ionization")
        firsts.append(t)
    return survival_from_times(firsts, grid)


def survival_from_times(times, grid) -> np.ndarray:
    times = np.sort(np.asarray(times, float))
    return times.size - np.searchsorted(times, np.asarray(grid, float), side="right")


def write_timelines(path, timelines: Iterable[EventTimeline]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle_id", "time_s", "transition"])
        for tl in timelines:
            for t, tr in zip(tl.times, tl.transitions):
                w.writerow([tl.cycle_id, repr(float(t)), tr])


def read_timelines(path) -> list[EventTimeline]:
    out: dict[int, EventTimeline] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cid = int(row["cycle_id"])
            tl = out.setdefault(cid, EventTimeline(cycle_id=cid))
            if row["transition"] not in TRANSITIONS:
                raise ValueError(f"unknown transition {row['transition']!r}")
            tl.append(float(row["time_s"]), row["transition"])
    return list(out.values())
