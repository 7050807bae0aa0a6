"""Baseband IQ readout traces.

A trace is rendered from an :class:`~rfreadout.dynamics.EventTimeline` as
an ideal amplitude waveform along the response direction ``iq_angle``:
the charge-state level sequence plus the laser transient.  Each sample
holds the waveform average over the preceding sample interval, so edges
at arbitrary times enter with sub-sample weight.  White Gaussian noise is
added per sample on I and Q and the result goes through the causal
readout low-pass.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, curve_fit, fsolve
from scipy.signal import lfilter

from .dynamics import EventTimeline, PulseSchedule

SNR_REFERENCE_TIME = 1e-6
DEFAULT_T_INT_GRID = (0.25e-6, 0.5e-6, 1e-6, 2e-6, 4e-6)


@dataclass(frozen=True)
class TraceConfig:
    sample_rate: float = 50e6
    filter_cutoff: float = 2e6
    filter_order: int = 1
    noise_sigma: float = 0.0  # per sample and quadrature, before the filter
    level_neutral: float = 43.5e-3
    level_ionized: float = 31.5e-3
    iq_angle: float = 0.0
    contrast_fluctuation: float = 0.0  # relative rms of the per-event drop
    pre_trigger: float = 5e-6
    duration: float = 15e-6
    telegraph_amplitude: float = 0.0
    telegraph_rate: float = 1e6

    def __post_init__(self):
        if not self.sample_rate > 2 * self.filter_cutoff:
            raise ValueError("sample_rate must exceed twice the filter cutoff")
        if self.filter_order < 1:
            raise ValueError("filter_order must be >= 1")
        if self.noise_sigma < 0 or self.contrast_fluctuation < 0:
            raise ValueError("noise terms must be non-negative")
        if self.level_neutral == self.level_ionized:
            raise ValueError("charge states must give distinct levels")

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def contrast(self) -> float:
        return self.level_ionized - self.level_neutral

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.iq_angle), math.sin(self.iq_angle)])

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass(frozen=True)
class LaserTransient:
    jump_amplitude: float = 12e-3  # at the reference pulse energy
    onset_delay: float = 0.33e-6
    decay_time: float = 150e-9
    impact_window: float = 1.0e-6
    amplitude_jitter: float = 0.1
    reference_energy: float = 7.6 * 100e-9  # mW*s

    def __post_init__(self):
        if not self.decay_time > 0:
            raise ValueError("decay_time must be positive")
        if self.onset_delay < 0 or self.impact_window < 0:
            raise ValueError("transient timing must be non-negative")

    def amplitude(self, s: PulseSchedule) -> float:
        """Jump size for schedule `s`; linear in pulse energy, zero without light."""
        if s.power <= 0 or s.pulse_length <= 0:
            return 0.0
        return self.jump_amplitude * s.energy / self.reference_energy

    def onset(self, s: PulseSchedule) -> float:
        return s.pulse_start + self.onset_delay

    def impact_end(self, s: PulseSchedule) -> float:
        return s.pulse_start + max(self.impact_window, s.pulse_length)


NO_TRANSIENT = LaserTransient(jump_amplitude=0.0, amplitude_jitter=0.0)


@dataclass
class IQTrace:
    start_time: float
    dt: float
    i: np.ndarray
    q: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.i.shape != self.q.shape or self.i.ndim != 1:
            raise ValueError("I and Q must be equal-length 1-D arrays")

    def __len__(self):
        return self.i.size

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(self.i.size)

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.i, self.q)

    def index_of(self, t: float) -> int:
        return int(round((t - self.start_time) / self.dt))

    def project(self, direction, baseline=(0.0, 0.0)) -> np.ndarray:
        """Signal component along unit vector `direction` after removing `baseline`."""
        u = np.asarray(direction, float)
        return (self.i - baseline[0]) * u[0] + (self.q - baseline[1]) * u[1]

    def baseline(self, t_from: float, t_to: float) -> tuple[float, float]:
        """Mean (I, Q) over ``[t_from, t_to)``."""
        a = max(0, int(math.ceil((t_from - self.start_time) / self.dt - 1e-9)))
        b = min(self.i.size, int(math.ceil((t_to - self.start_time) / self.dt - 1e-9)))
        if b <= a:
            raise ValueError("empty baseline window")
        return float(self.i[a:b].mean()), float(self.q[a:b].mean())

    # -- serialization -----------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# start_time={self.start_time!r} dt={self.dt!r}\n")
            w = csv.writer(fh)
            w.writerow(["time_s", "I_V", "Q_V"])
            for k in range(self.i.size):
                t = self.start_time + self.dt * k
                w.writerow([repr(t), repr(float(self.i[k])), repr(float(self.q[k]))])

    @classmethod
    def from_csv(cls, path) -> "IQTrace":
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
        skip = 2 if first.startswith("#") else 1
        data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
        if first.startswith("#"):
            fields = dict(kv.split("=") for kv in first[1:].split())
            start, dt = float(fields["start_time"]), float(fields["dt"])
        else:
            t = data[:, 0]
            start, dt = float(t[0]), float(t[1] - t[0]) if t.size > 1 else 0.0
        return cls(start, dt, data[:, 1], data[:, 2])

    _MAGIC = b"IQTR"
    _HEADER = struct.Struct("<4sIQddI")

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        head = self._HEADER.pack(self._MAGIC, 1, self.i.size, self.dt, self.start_time, len(meta))
        return b"".join([head, meta, self.i.astype("<f8").tobytes(), self.q.astype("<f8").tobytes()])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "IQTrace":
        magic, version, n, dt, start, mlen = cls._HEADER.unpack_from(buf, 0)
        if magic != cls._MAGIC or version != 1:
            raise ValueError("not an IQ trace record")
        off = cls._HEADER.size
        meta = json.loads(buf[off:off + mlen].decode("utf-8"))
        off += mlen
        i = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(float)
        q = np.frombuffer(buf, dtype="<f8", count=n, offset=off + 8 * n).astype(float)
        return cls(start, dt, i, q, meta)

    def write_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def read_binary(cls, path) -> "IQTrace":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# --------------------------------------------------------------------------
# filtering


def rc_coefficients(cutoff: float, dt: float, order: int = 1):
    """Cascade of `order` identical single-pole sections, each ``-3 dB`` at `cutoff`.

    Each pole is the impulse-invariant image of an RC stage, so the DC gain
    is exactly one.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not 0 < cutoff < 0.5 / dt:
        raise ValueError(f"cutoff {cutoff} Hz must lie below Nyquist ({0.5 / dt} Hz)")
    a = math.exp(-2 * math.pi * cutoff * dt)
    b_poly, a_poly = np.array([1.0]), np.array([1.0])
    for _ in range(order):
        b_poly = np.convolve(b_poly, [1 - a])
        a_poly = np.convolve(a_poly, [1.0, -a])
    return b_poly, a_poly


def filter_array(x, cutoff: float, dt: float, order: int = 1, initial=None) -> np.ndarray:
    """Causal low-pass of `x`; the filter starts settled at `initial` (default x[0])."""
    x = np.asarray(x, float)
    b, a = rc_coefficients(cutoff, dt, order)
    if x.size == 0:
        return x.copy()
    level = x[0] if initial is None else initial
    zi = _settled_state(b, a) * level
    y, _ = lfilter(b, a, x, zi=zi)
    return y


def _settled_state(b, a):
    from scipy.signal import lfilter_zi

    return lfilter_zi(b, a)


def lowpass(trace: IQTrace, cutoff: float, order: int = 1) -> IQTrace:
    """Apply the readout low-pass independently to I and Q."""
    meta = dict(trace.metadata, lowpass={"cutoff": cutoff, "order": order})
    return IQTrace(trace.start_time, trace.dt,
                   filter_array(trace.i, cutoff, trace.dt, order),
                   filter_array(trace.q, cutoff, trace.dt, order), meta)


def settle_samples(cutoff: float, dt: float, order: int = 1) -> int:
    return int(math.ceil(20 * order / (2 * math.pi * cutoff * dt)))


def noise_autocovariance(cfg: TraceConfig, n_lags: int) -> np.ndarray:
    """Autocovariance of filtered unit-variance white noise at lags 0..n_lags-1."""
    b, a = rc_coefficients(cfg.filter_cutoff, cfg.dt, cfg.filter_order)
    n_h = n_lags + 40 * settle_samples(cfg.filter_cutoff, cfg.dt, cfg.filter_order)
    imp = np.zeros(n_h)
    imp[0] = 1.0
    h = lfilter(b, a, imp)
    full = np.correlate(h, h, mode="full")[n_h - 1:]
    return full[:n_lags]


# --------------------------------------------------------------------------
# waveform rendering


def render_steps(t_end: np.ndarray, dt: float, edges, amplitudes) -> np.ndarray:
    """Average over ``[t - dt, t)`` of ``sum_j a_j * H(t - t_j)``."""
    out = np.zeros(t_end.size)
    for t_j, a_j in zip(edges, amplitudes):
        out += a_j * np.clip((t_end - t_j) / dt, 0.0, 1.0)
    return out


def render_decay(t_end: np.ndarray, dt: float, onset: float, amplitude: float,
                 decay: float) -> np.ndarray:
    """Average over ``[t - dt, t)`` of ``a * exp(-(t - onset)/decay)`` for t >= onset."""
    lo = np.maximum(t_end - dt, onset)
    hi = np.maximum(t_end, onset)
    # integral of exp(-(u - onset)/decay) over [lo, hi]
    integ = decay * (np.exp(-(lo - onset) / decay) - np.exp(-(hi - onset) / decay))
    return amplitude * integ / dt


def _telegraph(t_end, dt, amplitude, rate, rng) -> np.ndarray:
    t0, t1 = t_end[0] - dt, t_end[-1]
    n_sw = rng.poisson(rate * (t1 - t0))
    switches = np.sort(rng.uniform(t0, t1, n_sw))
    sign0 = 1.0 if rng.random() < 0.5 else -1.0
    # level is +-amplitude/2; every switch flips it
    amps = -sign0 * amplitude * (-1.0) ** np.arange(n_sw)
    return sign0 * amplitude / 2 + render_steps(t_end, dt, switches, amps)


def ideal_amplitude(times: np.ndarray, dt: float, tl: EventTimeline, s: PulseSchedule,
                    cfg: TraceConfig, lt: LaserTransient,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Noise-free amplitude along the response direction, sample-averaged."""
    edges, amps = [], []
    contrast = cfg.contrast
    for t_ion, t_reset in tl.ionized_intervals():
        c = contrast
        if cfg.contrast_fluctuation > 0 and rng is not None:
            c *= 1.0 + cfg.contrast_fluctuation * rng.standard_normal()
        edges.append(t_ion)
        amps.append(c)
        if t_reset is not None:
            edges.append(t_reset)
            amps.append(-c)
    wave = cfg.level_neutral + render_steps(times, dt, edges, amps)
    a_tr = lt.amplitude(s)
    if a_tr != 0:
        if lt.amplitude_jitter > 0 and rng is not None:
            a_tr *= 1.0 + lt.amplitude_jitter * rng.standard_normal()
        wave += render_decay(times, dt, lt.onset(s), a_tr, lt.decay_time)
    if cfg.telegraph_amplitude > 0 and rng is not None:
        wave += _telegraph(times, dt, cfg.telegraph_amplitude, cfg.telegraph_rate, rng)
    return wave


def synthesize_trace(tl: EventTimeline, s: PulseSchedule, cfg: TraceConfig,
                     lt: LaserTransient = NO_TRANSIENT, seed=None) -> IQTrace:
    """Filtered, noisy IQ trace for one cycle (trigger at t = 0)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dt = cfg.dt
    n = cfg.n_samples
    pad = settle_samples(cfg.filter_cutoff, dt, cfg.filter_order)
    start = -cfg.pre_trigger
    t_end = start + dt * np.arange(-pad, n)
    wave = ideal_amplitude(t_end, dt, tl, s, cfg, lt, rng)
    u = cfg.direction
    i = wave * u[0]
    q = wave * u[1]
    if cfg.noise_sigma > 0:
        i = i + cfg.noise_sigma * rng.standard_normal(i.size)
        q = q + cfg.noise_sigma * rng.standard_normal(q.size)
    level = cfg.level_neutral
    i = filter_array(i, cfg.filter_cutoff, dt, cfg.filter_order, initial=level * u[0])[pad:]
    q = filter_array(q, cfg.filter_cutoff, dt, cfg.filter_order, initial=level * u[1])[pad:]
    meta = {"cycle_id": tl.cycle_id,
            "seed": seed if isinstance(seed, (int, np.integer)) else None}
    if isinstance(meta["seed"], np.integer):
        meta["seed"] = int(meta["seed"])
    return IQTrace(start, dt, i, q, meta)


def dc_channel(tl: EventTimeline, bandwidth: float = 2e3, *, start: float = 0.0,
               stop: float | None = None, sample_rate: float = 1e6,
               current_neutral: float = 1.0e-9, current_ionized: float = 0.8e-9):
    """Drain current of the bandwidth-limited DC measurement; returns (t, I)."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if stop is None:
        last = max([t for iv in tl.ionized_intervals() for t in iv if t is not None],
                   default=start)
        stop = max(last + 10 / bandwidth, start + 10 / bandwidth)
    dt = 1.0 / sample_rate
    t = start + dt * np.arange(1, int(round((stop - start) / dt)) + 1)
    edges, amps = [], []
    step = current_ionized - current_neutral
    for t_ion, t_reset in tl.ionized_intervals():
        edges.append(t_ion)
        amps.append(step)
        if t_reset is not None:
            edges.append(t_reset)
            amps.append(-step)
    ideal = current_neutral + render_steps(t, dt, edges, amps)
    return t, filter_array(ideal, bandwidth, dt, 1, initial=current_neutral)


# --------------------------------------------------------------------------
# noise calibration


def boxcar_means(x: np.ndarray, m: int) -> np.ndarray:
    """Means of consecutive non-overlapping blocks of `m` samples."""
    k = x.size // m
    return x[: k * m].reshape(k, m).mean(axis=1)


def _unit_noise_windows(cfg: TraceConfig, m: int, n_windows: int, rng) -> np.ndarray:
    pad = settle_samples(cfg.filter_cutoff, cfg.dt, cfg.filter_order)
    w = rng.standard_normal(m * n_windows + pad)
    y = filter_array(w, cfg.filter_cutoff, cfg.dt, cfg.filter_order, initial=0.0)[pad:]
    return boxcar_means(y, m)


def calibrate_noise(target_snr_1us: float, contrast: float, cfg: TraceConfig, *,
                    t0: float = 0.5e-6, n_windows: int = 100_000, seed=0) -> float:
    """Per-sample noise sigma giving SNR `target_snr_1us` at 1 us effective integration.

    The effective integration time is ``t0 + t_int``; the noise-only
    neutral and ionized clusters are built from `n_windows` boxcar means
    of ``t_int = 1 us - t0`` of simulated filtered noise, and the ionized
    cluster also carries the configured per-event contrast fluctuation.
    """
    contrast = abs(contrast)
    if not contrast > 0:
        raise ValueError("contrast must be non-zero")
    if math.isinf(target_snr_1us):
        return 0.0
    if not target_snr_1us > 0:
        raise ValueError("target SNR must be positive")
    t_int = SNR_REFERENCE_TIME - t0
    m = int(round(t_int * cfg.sample_rate))
    if m < 1:
        raise ValueError("intrinsic integration time leaves no integration window")
    rng = np.random.default_rng(seed)
    wn = _unit_noise_windows(cfg, m, n_windows, rng)
    wi = _unit_noise_windows(cfg, m, n_windows, rng)
    fl = cfg.contrast_fluctuation * contrast * rng.standard_normal(wi.size)
    sn = wn.std(ddof=1)

    def snr(sigma):
        return contrast / (0.5 * (sigma * sn + np.std(sigma * wi + fl, ddof=1)))

    ceiling = snr(0.0) if cfg.contrast_fluctuation > 0 else math.inf
    if target_snr_1us >= ceiling:
        raise ValueError(f"SNR {target_snr_1us} unreachable: contrast fluctuation caps it at "
                         f"{ceiling:.3g}")
    if cfg.contrast_fluctuation == 0:
        return float(contrast / (target_snr_1us * sn))
    hi = contrast / (target_snr_1us * sn)
    return float(brentq(lambda s: snr(s) - target_snr_1us, 0.0, hi, xtol=1e-15))


def snr_law(t_int, snr_1us, t0):
    """``SNR_1us * sqrt((t0 + t_int) / 1 us)``."""
    return snr_1us * np.sqrt((t0 + np.asarray(t_int, float)) / SNR_REFERENCE_TIME)


def expected_snr(cfg: TraceConfig, t_ints, contrast: float | None = None) -> np.ndarray:
    """SNR versus boxcar time from the exact filtered-noise autocovariance."""
    contrast = abs(cfg.contrast if contrast is None else contrast)
    ms = [max(1, int(round(t * cfg.sample_rate))) for t in t_ints]
    R = noise_autocovariance(cfg, max(ms))
    out = []
    for m in ms:
        k = np.arange(1, m)
        v = (m * R[0] + 2 * np.sum((m - k) * R[1:m])) / m**2
        sn = cfg.noise_sigma * math.sqrt(v)
        si = math.sqrt(sn**2 + (cfg.contrast_fluctuation * contrast) ** 2)
        out.append(contrast / (0.5 * (sn + si)) if sn + si > 0 else math.inf)
    return np.array(out)


def calibrate_snr_law(snr_1us: float, t0: float, cfg: TraceConfig,
                      t_ints=DEFAULT_T_INT_GRID) -> TraceConfig:
    """Choose white-noise sigma and contrast fluctuation reproducing the SNR law.

    White noise alone fixes the law's intercept near the filter time
    constant; the per-event fluctuation of the ionized level flattens
    SNR at long integration and moves the fitted intrinsic time to `t0`.
    """
    t_ints = np.asarray(t_ints, float)

    def fitted(x):
        c = replace(cfg, noise_sigma=abs(x[0]) * abs(cfg.contrast),
                    contrast_fluctuation=abs(x[1]))
        popt, _ = curve_fit(snr_law, t_ints, expected_snr(c, t_ints), p0=[snr_1us, t0])
        return popt

    def eqs(x):
        p = fitted(x)
        return [p[0] / snr_1us - 1.0, p[1] / t0 - 1.0]

    white = replace(cfg, noise_sigma=abs(cfg.contrast), contrast_fluctuation=0.0)
    s_guess = float(expected_snr(white, [SNR_REFERENCE_TIME])[0]) / snr_1us
    x, info, ier, msg = fsolve(eqs, [0.7 * s_guess, 0.05], full_output=True)
    if ier != 1 or max(abs(v) for v in eqs(x)) > 1e-6:
        raise ValueError(f"SNR law calibration failed: {msg}")
    return replace(cfg, noise_sigma=float(abs(x[0]) * abs(cfg.contrast)),
                   contrast_fluctuation=float(abs(x[1])))
