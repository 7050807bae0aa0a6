"""Event finding and ionization-time fitting on readout traces.

Traces are reduced to the signal component along the known response
direction, referenced to the pre-trigger baseline.  Candidates come from
two-level hysteresis discrimination; each candidate is then fitted with a
template made of the same sample-averaged steps and laser transient that
the synthesizer renders, passed through the readout filter.  The fit is
separable: ``t_ion`` (and ``t_reset``) are searched on a grid and
refined with a bounded scalar minimizer, the amplitudes come from linear
least squares at every trial.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import lfilter

from .dynamics import BACKGROUND_IONIZE, EventTimeline, PulseSchedule, RESET
from .seeding import STAGE_MC, seed_fanout
from .signals import (NO_TRANSIENT, IQTrace, LaserTransient, TraceConfig,
                      rc_coefficients, render_decay, settle_samples,
                      synthesize_trace)


class Candidate(NamedTuple):
    start: float
    end: float
    closed: bool  # False when the trace ends while still ionized
    area: float  # integral of the normalized signal over the interval, seconds


@dataclass
class DetectionResult:
    detected: bool
    t_ion: float = math.nan
    sigma_t: float = math.nan
    duration: float = math.nan
    amplitude: float = math.nan
    residual: float = math.nan
    message: str = ""
    cycle_id: int = -1


@dataclass(frozen=True)
class DetectConfig:
    threshold_fraction: float = 0.5
    release_fraction: float = 0.3
    smoothing: float = 0.0  # boxcar length applied before discrimination
    merge_gap: float = 0.2e-6  # neutral gaps shorter than this do not split an event
    baseline_window: float = 5e-6  # pre-trigger span averaged for the reference level
    fit_pre: float = 1.0e-6
    fit_post: float = 2.0e-6
    free_amplitude: bool = True
    free_transient: bool = True

    def __post_init__(self):
        if not 0 < self.release_fraction <= self.threshold_fraction:
            raise ValueError("need 0 < release_fraction <= threshold_fraction")


@dataclass(frozen=True)
class FitModel:
    """Everything pinned in the ionization-time fit."""

    trace_config: TraceConfig
    schedule: PulseSchedule | None = None
    transient: LaserTransient = NO_TRANSIENT
    free_amplitude: bool = True
    free_transient: bool = True
    fit_reset: bool = True
    pre: float = 1.0e-6
    post: float = 2.0e-6

    @classmethod
    def from_config(cls, cfg: TraceConfig, schedule, transient, det: DetectConfig):
        return cls(cfg, schedule, transient, det.free_amplitude, det.free_transient,
                   True, det.fit_pre, det.fit_post)


# --------------------------------------------------------------------------
# candidates


def normalized_signal(trace: IQTrace, contrast: float, direction=(1.0, 0.0),
                      baseline=(0.0, 0.0)) -> np.ndarray:
    """0 at the neutral level, 1 at the ionized level."""
    return trace.project(direction, baseline) / contrast


def hysteresis_mask(x: np.ndarray, enter: float, release: float) -> np.ndarray:
    """True while in the high state: entered at ``x >= enter``, left at ``x < release``."""
    marks = np.zeros(x.size, dtype=np.int8)
    marks[x < release] = -1
    marks[x >= enter] = 1
    idx = np.where(marks != 0, np.arange(x.size), -1)
    last = np.maximum.accumulate(idx)
    state = np.where(last >= 0, marks[np.maximum(last, 0)], -1)
    return state == 1


def find_events(trace: IQTrace, contrast: float, threshold_fraction: float = 0.5, *,
                release_fraction: float = 0.3, direction=(1.0, 0.0), baseline=(0.0, 0.0),
                smoothing: float = 0.0, merge_gap: float = 0.0, t_from: float | None = None,
                t_to: float | None = None) -> list[Candidate]:
    """Intervals spent at the ionized level.

    `baseline` is the neutral (I, Q) reference, `direction` the unit
    response direction, and `contrast` the signed ionized-minus-neutral
    amplitude along it.  An interval opens when the normalized signal
    reaches `threshold_fraction` and closes when it drops below
    `release_fraction`.  Intervals separated by less than `merge_gap` are
    joined.
    """
    if contrast == 0:
        raise ValueError("contrast must be non-zero")
    x = normalized_signal(trace, contrast, direction, baseline)
    t = trace.times
    m = int(round(smoothing / trace.dt))
    if m > 1:
        # causal running mean; before the trace the neutral reference (0) is assumed
        c = np.cumsum(np.concatenate([np.zeros(m), x]))
        x = (c[m:] - c[:-m]) / m
    keep = np.ones(x.size, dtype=bool)
    if t_from is not None:
        keep &= t >= t_from
    if t_to is not None:
        keep &= t <= t_to
    mask = hysteresis_mask(np.where(keep, x, -np.inf), threshold_fraction, release_fraction)
    d = np.diff(mask.astype(np.int8), prepend=0, append=0)
    starts = np.nonzero(d == 1)[0]
    ends = np.nonzero(d == -1)[0]
    if merge_gap > 0 and starts.size > 1:
        keep_gap = (starts[1:] - ends[:-1]) * trace.dt >= merge_gap
        starts = starts[np.concatenate([[True], keep_gap])]
        ends = ends[np.concatenate([keep_gap, [True]])]
    out = []
    for a, b in zip(starts, ends):
        closed = b < x.size and keep[min(b, x.size - 1)]
        t_end = t[b] if b < x.size else t[-1] + trace.dt
        out.append(Candidate(float(t[a]), float(t_end), bool(closed),
                             float(np.sum(x[a:b]) * trace.dt)))
    return out


# --------------------------------------------------------------------------
# template fit


class _Template:
    """Filtered unit step and transient columns on one fit window."""

    def __init__(self, trace: IQTrace, model: FitModel, i_lo: int, i_hi: int):
        cfg = model.trace_config
        self.dt = trace.dt
        self.pad = settle_samples(cfg.filter_cutoff, trace.dt, cfg.filter_order)
        self.b, self.a = rc_coefficients(cfg.filter_cutoff, trace.dt, cfg.filter_order)
        self.i_lo, self.i_hi = i_lo, i_hi
        k = np.arange(i_lo - self.pad, i_hi)
        self.t_end = trace.start_time + trace.dt * k
        self.transient = None
        s, lt = model.schedule, model.transient
        if s is not None and lt.amplitude(s) != 0:
            # filter memory reaches back to the transient onset
            k0 = min(i_lo - self.pad, trace.index_of(lt.onset(s)) - 1)
            kk = np.arange(k0, i_hi)
            tt = trace.start_time + trace.dt * kk
            col = lfilter(self.b, self.a, render_decay(tt, trace.dt, lt.onset(s),
                                                       lt.amplitude(s), lt.decay_time))
            col = col[i_lo - k0:]
            if np.max(np.abs(col)) > 1e-3 * abs(lt.amplitude(s)):
                self.transient = col

    def steps(self, edges, amps) -> np.ndarray:
        """Filtered step columns; `edges` has shape (G, E), one row per trial."""
        edges = np.atleast_2d(edges)
        x = np.zeros((edges.shape[0], self.t_end.size))
        for j, a_j in enumerate(amps):
            x += a_j * np.clip((self.t_end - edges[:, j:j + 1]) / self.dt, 0.0, 1.0)
        return lfilter(self.b, self.a, x, axis=-1)[:, self.pad:]


def _solve(y, S, tr, model: FitModel, contrast: float):
    """Separable least squares for each row of `S`; returns (cost, amp, n_linear).

    The linear parameters are the step amplitude (if free) and the
    transient scale (if free); both have closed-form normal equations.
    """
    free_tr = tr is not None and model.free_transient
    target = y if tr is None or model.free_transient else y - tr
    n_lin = int(model.free_amplitude) + int(free_tr)
    if model.free_amplitude:
        ss = np.einsum("gn,gn->g", S, S)
        sy = S @ target
        if free_tr:
            st = S @ tr
            tt = tr @ tr
            ty = tr @ target
            det = ss * tt - st**2
            with np.errstate(divide="ignore", invalid="ignore"):
                amp = (sy * tt - st * ty) / det
                k = (ss * ty - st * sy) / det
            r = target[None, :] - amp[:, None] * S - k[:, None] * tr[None, :]
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                amp = sy / ss
            r = target[None, :] - amp[:, None] * S
    else:
        amp = np.full(S.shape[0], contrast)
        r = target[None, :] - contrast * S
        if free_tr:
            k = (r @ tr) / (tr @ tr)
            r = r - k[:, None] * tr[None, :]
    return np.einsum("gn,gn->g", r, r), amp, n_lin


def fit_ionization_time(trace: IQTrace, candidate, model: FitModel, *,
                        baseline=None) -> DetectionResult:
    """Least-squares ionization time for one candidate interval.

    `candidate` is a :class:`Candidate` or a ``(start, end)`` pair.  The
    signal is projected on the configured response direction relative to
    `baseline` (default: mean over the pre-trigger window).
    """
    cfg = model.trace_config
    dt = trace.dt
    if not isinstance(candidate, Candidate):
        start, end = candidate[:2]
        t_last = trace.start_time + dt * (len(trace) - 1)
        candidate = Candidate(float(start), float(min(end, t_last + dt)), end <= t_last, 0.0)
    if baseline is None:
        baseline = trace.baseline(trace.start_time, min(0.0, candidate.start))
    y_all = trace.project(cfg.direction, baseline)
    contrast = cfg.contrast

    t_first = trace.start_time
    t_last = trace.start_time + dt * (len(trace) - 1)
    lo_t = max(t_first, candidate.start - model.pre)
    if candidate.closed and model.fit_reset and candidate.end - candidate.start <= model.post:
        hi_t = min(t_last, candidate.end + 0.5 * model.post)
        with_reset = True
    else:
        hi_t = min(t_last, candidate.start + model.post)
        with_reset = False
    rise = 0.35 / cfg.filter_cutoff
    if hi_t - lo_t < rise:
        raise ValueError(f"fit window {hi_t - lo_t:.3g} s is shorter than the filter rise time")
    i_lo, i_hi = trace.index_of(lo_t), trace.index_of(hi_t) + 1
    y = y_all[i_lo:i_hi]
    tpl = _Template(trace, model, i_lo, i_hi)

    def costs(t_ion, t_reset):
        t_ion = np.atleast_1d(np.asarray(t_ion, float))
        if t_reset is None:
            S = tpl.steps(t_ion[:, None], [1.0])
        else:
            t_reset = np.broadcast_to(np.asarray(t_reset, float), t_ion.shape)
            S = tpl.steps(np.column_stack([t_ion, t_reset]), [1.0, -1.0])
        return _solve(y, S, tpl.transient, model, contrast)

    def search(batch, lo, hi):
        grid = np.arange(lo, hi + 0.5 * dt, dt)
        if grid.size == 0:
            grid = np.array([lo])
        g = float(grid[int(np.argmin(batch(grid)))])
        res = minimize_scalar(lambda t: float(batch(t)[0]),
                              bounds=(max(lo, g - dt), min(hi, g + dt)), method="bounded",
                              options={"xatol": 1e-3 * dt})
        return float(res.x), bool(res.success)

    ion_lo = max(lo_t, candidate.start - 0.6e-6)
    # a merged noise fragment can open the candidate early, so allow the edge
    # to sit well inside it
    ion_hi = min(candidate.start + min(0.6e-6, 0.5 * (candidate.end - candidate.start)), hi_t)
    t_reset = None
    if with_reset:
        t_reset = min(candidate.end, hi_t)
    ok = True
    t_ion = candidate.start
    for _ in range(2 if with_reset else 1):
        tr = t_reset
        t_ion, ok1 = search(lambda t: costs(t, tr)[0], ion_lo,
                            min(ion_hi, (tr or hi_t) - 0.25 * dt))
        ok &= ok1
        if with_reset:
            r_lo = max(t_ion + 0.25 * dt, candidate.end - 0.6e-6)
            r_hi = min(candidate.end + 0.1e-6, hi_t)
            ti = t_ion
            t_reset, ok2 = search(lambda t: costs(np.full(np.size(t), ti), t)[0], r_lo, r_hi)
            ok &= ok2
    cost, amp, n_lin = costs(t_ion, t_reset)
    best_cost, best_amp = float(cost[0]), float(amp[0])
    dof = max(y.size - (1 + int(with_reset) + n_lin), 1)
    s2 = best_cost / dof
    # the sample-averaged template makes the cost piecewise smooth, so widen
    # the difference step until the curvature is resolved
    curv = 0.0
    for h in (0.5 * dt, dt, 2 * dt, 4 * dt):
        if t_ion - h < lo_t:
            break
        c_minus, c_plus = costs([t_ion - h, t_ion + h], t_reset)[0]
        curv = (c_plus - 2 * best_cost + c_minus) / h**2
        if curv > 0:
            break
    sigma = math.sqrt(2 * s2 / curv) if curv > 0 else math.nan
    duration = (t_reset - t_ion) if t_reset is not None else math.nan
    res = DetectionResult(True, t_ion, sigma, duration, best_amp, math.sqrt(best_cost),
                          cycle_id=trace.metadata.get("cycle_id", -1))
    if not ok:
        res.detected, res.message = False, "bounded search did not converge"
    elif not math.isfinite(best_amp) or best_amp * contrast <= 0:
        res.detected, res.message = False, "fitted step has the wrong sign"
    elif not curv > 0:
        res.detected, res.message = False, "flat cost at optimum"
    return res


# --------------------------------------------------------------------------
# whole-cycle analysis


@dataclass(frozen=True)
class ReadoutSystem:
    """Readout chain used by the Monte Carlo characterizations."""

    trace: TraceConfig
    schedule: PulseSchedule
    transient: LaserTransient = NO_TRANSIENT
    detect: DetectConfig = DetectConfig()

    def fit_model(self) -> FitModel:
        return FitModel.from_config(self.trace, self.schedule, self.transient, self.detect)


def analyze_pulsed_trace(trace: IQTrace, system: ReadoutSystem) -> DetectionResult:
    """Baseline, discriminate and fit the dominant ionization in one pulsed cycle."""
    det = system.detect
    cfg = system.trace
    base = trace.baseline(-det.baseline_window, 0.0)
    cands = find_events(trace, cfg.contrast, det.threshold_fraction,
                        release_fraction=det.release_fraction, direction=cfg.direction,
                        baseline=base, smoothing=det.smoothing, merge_gap=det.merge_gap,
                        t_from=system.schedule.pulse_start)
    cycle = trace.metadata.get("cycle_id", -1)
    if not cands:
        return DetectionResult(False, message="no candidate", cycle_id=cycle)
    best = max(cands, key=lambda c: c.area)
    try:
        res = fit_ionization_time(trace, best, system.fit_model(), baseline=base)
    except ValueError as exc:
        return DetectionResult(False, message=str(exc), cycle_id=cycle)
    res.cycle_id = cycle
    return res


def single_event_timeline(t_ion: float, duration: float | None = None,
                          cycle_id: int = 0) -> EventTimeline:
    tl = EventTimeline(cycle_id=cycle_id)
    tl.append(t_ion, BACKGROUND_IONIZE)
    if duration is not None:
        tl.append(t_ion + duration, RESET)
    return tl


@dataclass
class ResolutionCurve:
    t_ion: np.ndarray
    rms: np.ndarray
    rms_err: np.ndarray
    bias: np.ndarray
    sigma_fit: np.ndarray  # median curvature-based sigma_t
    n_failed: np.ndarray


def _bootstrap_rms(err: np.ndarray, rng, n_boot: int = 200) -> float:
    if err.size < 2:
        return math.nan
    idx = rng.integers(0, err.size, size=(n_boot, err.size))
    return float(np.std(np.sqrt(np.mean(err[idx] ** 2, axis=1)), ddof=1))


def timing_errors(t_ion: float, system: ReadoutSystem, n_mc: int, seed: int,
                  offset: int = 0) -> tuple[np.ndarray, np.ndarray, int]:
    """Fitted-minus-true times of `n_mc` simulated single events at `t_ion`."""
    errs, sig = [], []
    failed = 0
    for k in range(n_mc):
        tl = single_event_timeline(t_ion, cycle_id=offset + k)
        tr = synthesize_trace(tl, system.schedule, system.trace, system.transient,
                              seed_fanout(seed, STAGE_MC, offset + k))
        res = analyze_pulsed_trace(tr, system)
        if not res.detected:
            failed += 1
            continue
        errs.append(res.t_ion - t_ion)
        sig.append(res.sigma_t)
    return np.array(errs), np.array(sig), failed


def time_resolution_curve(t_grid: Sequence[float], system: ReadoutSystem, n_mc: int = 1000,
                          seed: int = 0) -> ResolutionCurve:
    """RMS timing error versus true ionization time, with bootstrap errors.

    Every grid point reuses the same noise seeds so the curve shape is not
    blurred by independent sampling noise.
    """
    rng = np.random.default_rng(seed_fanout(seed, STAGE_MC, (1 << 47)))
    rms, err, bias, sfit, nfail = [], [], [], [], []
    for t in t_grid:
        e, s, f = timing_errors(float(t), system, n_mc, seed)
        rms.append(float(np.sqrt(np.mean(e**2))) if e.size else math.nan)
        err.append(_bootstrap_rms(e, rng))
        bias.append(float(np.mean(e)) if e.size else math.nan)
        sfit.append(float(np.nanmedian(s)) if s.size else math.nan)
        nfail.append(f)
    return ResolutionCurve(np.asarray(t_grid, float), np.array(rms), np.array(err),
                           np.array(bias), np.array(sfit), np.array(nfail))


# --------------------------------------------------------------------------
# records


DETECTION_FIELDS = ["cycle_id", "detected", "t_ion_s", "sigma_t_s", "duration_s",
                    "amplitude_V", "residual"]


def write_detections(path, results: Sequence[DetectionResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_FIELDS)
        for r in results:
            w.writerow([r.cycle_id, int(r.detected), repr(r.t_ion), repr(r.sigma_t),
                        repr(r.duration), repr(r.amplitude), repr(r.residual)])


def read_detections(path) -> list[DetectionResult]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(DetectionResult(bool(int(row["detected"])), float(row["t_ion_s"]),
                                       float(row["sigma_t_s"]), float(row["duration_s"]),
                                       float(row["amplitude_V"]), float(row["residual"]),
                                       cycle_id=int(row["cycle_id"])))
    return out
