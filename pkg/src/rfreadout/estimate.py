"""Population-level estimators.

Background threshold, excited-state lifetime, IQ-plane SNR and its
integration-time scaling, and detection fidelity versus reset time.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
from scipy.integrate import quad
from scipy.optimize import curve_fit

from .detect import ReadoutSystem, find_events, fit_ionization_time
from .dynamics import EventTimeline, RELAX_IONIZE, RESET, PulseSchedule
from .seeding import STAGE_MC, seed_fanout
from .signals import (NO_TRANSIENT, TraceConfig, boxcar_means, filter_array, settle_samples,
                      snr_law, synthesize_trace)


def background_threshold(control_events: Sequence[float]) -> float:
    """Latest ionization time seen in the control (non-resonant) run."""
    ev = np.asarray(control_events, float)
    if ev.size == 0:
        raise ValueError("no control events: threshold cannot be derived")
    return float(ev.max())


def expected_background(control_probability: float, n_cycles: int) -> float:
    """Background events expected among `n_cycles` at the control per-cycle probability."""
    return control_probability * n_cycles


def er_induced_fraction(n_events: int, control_probability: float, n_cycles: int) -> float:
    return 1.0 - expected_background(control_probability, n_cycles) / n_events


# --------------------------------------------------------------------------
# lifetime


@dataclass(frozen=True)
class LifetimeFit:
    tau: float
    sigma: float
    n_selected: int
    n_total: int
    t_min: float
    method: str

    def to_dict(self) -> dict:
        return asdict(self)


def fit_lifetime(events: Sequence[float], t_min: float, method: str = "mle", *,
                 min_events: int = 20, grid_step: float = 10e-9,
                 min_count: int = 10) -> LifetimeFit:
    """Exponential lifetime from ionization times later than `t_min`.

    ``method="mle"`` uses the left-truncated exponential estimator
    ``mean(t - t_min)`` with error ``tau / sqrt(n)``.  ``method="lsq"``
    fits ``log N(t)`` on a grid of spacing `grid_step` by weighted linear
    least squares (weights ``N``), stopping where fewer than `min_count`
    events survive.  Its error is the formal one, which ignores the
    correlation between points of a cumulative curve and is therefore
    much smaller than the MLE error.
    """
    ev = np.asarray(events, float)
    sel = np.sort(ev[ev > t_min])
    n = sel.size
    if n < min_events:
        raise ValueError(f"only {n} events after t_min={t_min:.4g} s (need {min_events})")
    if method == "mle":
        tau = float(np.mean(sel - t_min))
        return LifetimeFit(tau, tau / math.sqrt(n), n, ev.size, t_min, "mle")
    if method != "lsq":
        raise ValueError(f"unknown method {method!r}")
    grid = np.arange(t_min, sel[-1], grid_step)
    counts = n - np.searchsorted(sel, grid, side="right")
    use = counts >= min_count
    if use.sum() < 3:
        raise ValueError("too few survival points for a log-linear fit")
    x, N = grid[use], counts[use].astype(float)
    (slope, _), cov = np.polyfit(x, np.log(N), 1, w=np.sqrt(N), cov="unscaled")
    if not slope < 0:
        raise ValueError("survival curve does not decay")
    tau = -1.0 / slope
    return LifetimeFit(float(tau), float(math.sqrt(cov[0, 0]) * tau**2), n, ev.size, t_min, "lsq")


def survival_table(events: Sequence[float], grid) -> np.ndarray:
    ev = np.sort(np.asarray(events, float))
    return ev.size - np.searchsorted(ev, np.asarray(grid, float), side="right")


# --------------------------------------------------------------------------
# SNR


def compute_snr(samples_neutral, samples_ionized, t_int: float | None = None) -> float:
    """Center-to-center IQ distance over the mean cluster spread.

    Each cluster's spread is the standard deviation of its points projected
    on the axis joining the two centers, which is the only direction that
    matters for discrimination.  Zero-spread clusters give ``inf``.
    `t_int` only documents the boxcar time the points were averaged over.
    """
    a = np.atleast_2d(np.asarray(samples_neutral, float))
    b = np.atleast_2d(np.asarray(samples_ionized, float))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each cluster needs at least two points to define a spread")
    d = b.mean(axis=0) - a.mean(axis=0)
    dist = float(np.hypot(*d)) if d.size == 2 else float(np.linalg.norm(d))
    if dist == 0:
        return 0.0
    u = d / dist
    s = 0.5 * (np.std(a @ u, ddof=1) + np.std(b @ u, ddof=1))
    if s == 0:
        return math.inf
    return dist / s


def boxcar_clusters(cfg: TraceConfig, t_int: float, n_windows: int, seed=0):
    """Boxcar-averaged IQ points of the neutral and ionized levels.

    Noise traces are long filtered records cut into windows of `t_int`;
    every ionized window is one event and draws its own contrast
    fluctuation.
    """
    rng = np.random.default_rng(seed)
    m = max(1, int(round(t_int * cfg.sample_rate)))
    pad = settle_samples(cfg.filter_cutoff, cfg.dt, cfg.filter_order)
    u = cfg.direction

    def noise():
        if cfg.noise_sigma == 0:
            return np.zeros(n_windows)
        w = cfg.noise_sigma * rng.standard_normal(m * n_windows + pad)
        y = filter_array(w, cfg.filter_cutoff, cfg.dt, cfg.filter_order, initial=0.0)[pad:]
        return boxcar_means(y, m)

    out = []
    for level, fluct in ((cfg.level_neutral, 0.0), (cfg.level_ionized, cfg.contrast_fluctuation)):
        amp = level + fluct * cfg.contrast * rng.standard_normal(n_windows) if fluct else \
            np.full(n_windows, level)
        ni, nq = noise(), noise()
        # noise on each quadrature, signal along the response direction
        out.append(np.column_stack([amp * u[0] + ni, amp * u[1] + nq]))
    return out[0], out[1]


def measure_snr_curve(cfg: TraceConfig, t_ints, n_windows: int = 10_000, seed=0) -> np.ndarray:
    return np.array([compute_snr(*boxcar_clusters(cfg, t, n_windows, seed=[seed, k]), t)
                     for k, t in enumerate(t_ints)])


@dataclass(frozen=True)
class SnrFit:
    snr_1us: float
    snr_1us_err: float
    t0: float
    t0_err: float
    t_int: tuple
    snr: tuple

    def predict(self, t_int):
        return snr_law(t_int, self.snr_1us, self.t0)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_snr_scaling(t_int, snr) -> SnrFit:
    """Nonlinear least squares of ``SNR_1us * sqrt((t0 + t_int) / 1 us)``."""
    t = np.asarray(t_int, float)
    y = np.asarray(snr, float)
    if t.size < 3 or t.size != y.size:
        raise ValueError("need at least three (t_int, SNR) points")
    if np.ptp(t) == 0:
        raise ValueError("degenerate design: all integration times are equal")
    # SNR^2 is linear in t_int, which gives the starting point
    k, c = np.polyfit(t, y**2, 1)
    p0 = [math.sqrt(max(k, 1e-30) * 1e-6), max(c / k, 0.0) if k > 0 else 0.0]
    scale = np.array([1.0, 1e-6])
    popt, pcov = curve_fit(lambda x, a, b: snr_law(x, a, b * 1e-6), t, y, p0=np.array(p0) / scale,
                           bounds=([0.0, 0.0], [np.inf, np.inf]))
    err = np.sqrt(np.diag(pcov)) * scale
    popt = popt * scale
    return SnrFit(float(popt[0]), float(err[0]), float(popt[1]), float(err[1]),
                  tuple(map(float, t)), tuple(map(float, y)))


# --------------------------------------------------------------------------
# fidelity


@dataclass
class FidelityCurve:
    duration: np.ndarray
    infidelity: np.ndarray  # missed-event probability
    infidelity_err: np.ndarray
    false_positive: float  # probability of a spurious detection in an event-free window
    false_positive_err: float
    peak_contrast: np.ndarray  # filtered peak of the rectangular drop, relative to full contrast
    n_mc: int

    def to_rows(self):
        return [dict(duration_s=float(d), infidelity=float(p), infidelity_err=float(e),
                     peak_contrast=float(c))
                for d, p, e, c in zip(self.duration, self.infidelity, self.infidelity_err,
                                      self.peak_contrast)]


def filtered_peak(duration: float, cfg: TraceConfig) -> float:
    """Peak of the filtered unit rectangle of length `duration` (first order: 1 - e^{-d/tau})."""
    n = int(math.ceil(duration / cfg.dt)) + 10 * settle_samples(cfg.filter_cutoff, cfg.dt,
                                                                 cfg.filter_order)
    x = np.zeros(n)
    t_end = cfg.dt * np.arange(1, n + 1)
    x += np.clip(t_end / cfg.dt, 0, 1) - np.clip((t_end - duration) / cfg.dt, 0, 1)
    return float(filter_array(x, cfg.filter_cutoff, cfg.dt, cfg.filter_order, initial=0.0).max())


def _event_detected(trace, system: ReadoutSystem, lo: float, hi: float, baseline) -> bool:
    det, cfg = system.detect, system.trace
    cands = find_events(trace, cfg.contrast, det.threshold_fraction,
                        release_fraction=det.release_fraction, direction=cfg.direction,
                        baseline=baseline, smoothing=det.smoothing, merge_gap=det.merge_gap)
    model = replace(system.fit_model(), schedule=None, transient=NO_TRANSIENT)
    for c in cands:
        if c.end < lo or c.start > hi:
            continue
        try:
            if fit_ionization_time(trace, c, model, baseline=baseline).detected:
                return True
        except ValueError:
            continue
    return False


def infidelity_vs_reset(durations: Sequence[float], system: ReadoutSystem, n_mc: int = 1000,
                        seed: int = 0, *, t_ion: float = 2.0e-6, span: float = 6e-6,
                        n_boot: int = 200) -> FidelityCurve:
    """Missed-event probability versus ionization duration.

    Each Monte Carlo repeat injects one isolated ionization at `t_ion`
    lasting `duration` into a `span`-long trace and runs discrimination
    plus fit.  An event counts as found when a candidate overlapping
    ``[t_ion, t_ion + duration + 5 tau_filter]`` yields a detected fit.
    Repeat ``k`` uses the same noise seed at every duration (common random
    numbers), and the same noise without an event gives the false-positive
    rate over a window of the shortest-duration length.
    """
    cfg = replace(system.trace, pre_trigger=0.0, duration=span)
    sched = replace(system.schedule, power=0.0)
    sysd = replace(system, trace=cfg, schedule=sched, transient=NO_TRANSIENT)
    lag = 5.0 / (2 * math.pi * cfg.filter_cutoff)
    baseline = (cfg.level_neutral * cfg.direction[0], cfg.level_neutral * cfg.direction[1])
    misses = np.zeros((len(durations), n_mc), dtype=bool)
    false = np.zeros(n_mc, dtype=bool)
    for k in range(n_mc):
        sd = seed_fanout(seed, STAGE_MC, k)
        for j, d in enumerate(durations):
            tl = EventTimeline(cycle_id=k)
            if d > 0:
                tl.append(t_ion, RELAX_IONIZE)
                tl.append(t_ion + d, RESET)
            tr = synthesize_trace(tl, sched, cfg, NO_TRANSIENT, sd)
            misses[j, k] = not _event_detected(tr, sysd, t_ion, t_ion + d + lag, baseline)
        tr = synthesize_trace(EventTimeline(cycle_id=k), sched, cfg, NO_TRANSIENT, sd)
        false[k] = _event_detected(tr, sysd, t_ion, t_ion + min(durations) + lag, baseline)
    p = misses.mean(axis=1)
    rng = np.random.default_rng(seed_fanout(seed, STAGE_MC, (1 << 47) + 1))
    idx = rng.integers(0, n_mc, size=(n_boot, n_mc))
    err = misses[:, idx].mean(axis=2).std(axis=1, ddof=1)
    fp = float(false.mean())
    return FidelityCurve(np.asarray(durations, float), p, err, fp,
                         math.sqrt(max(fp * (1 - fp), 1.0 / n_mc) / n_mc),
                         np.array([filtered_peak(d, cfg) if d > 0 else 0.0 for d in durations]),
                         n_mc)


def overall_fidelity(durations, infidelity, tau_reset: float) -> float:
    """``1 - E[infidelity(D)]`` for exponential durations ``D`` with mean `tau_reset`.

    The curve is interpolated linearly; below the first grid point it is
    taken as 1 (no signal survives), above the last it is held at the last
    value.
    """
    d = np.asarray(durations, float)
    p = np.asarray(infidelity, float)
    if d.size < 2 or np.any(np.diff(d) <= 0):
        raise ValueError("durations must be strictly increasing with at least two points")
    if not tau_reset > 0 or not np.all(np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("infidelity must lie in [0, 1] and tau_reset be positive")
    rate = 1.0 / tau_reset

    def f(x):
        return float(np.interp(x, d, p)) * rate * math.exp(-x * rate)

    head = 1.0 - math.exp(-d[0] * rate)  # everything shorter than the first point is missed
    body, _ = quad(f, d[0], d[-1], points=list(d[1:-1])[:48], limit=400)
    tail = p[-1] * math.exp(-d[-1] * rate)
    return 1.0 - (head + body + tail)


def short_event_fraction(durations, limit: float = 0.5e-6) -> float:
    d = np.asarray(durations, float)
    if d.size == 0:
        raise ValueError("no durations")
    return float(np.mean(d < limit))


def expected_short_fraction(tau_reset: float, limit: float = 0.5e-6) -> float:
    return 1.0 - math.exp(-limit / tau_reset)


# --------------------------------------------------------------------------
# records


def write_json(path, record: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def write_curve_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
