"""Experiment configuration, seeded campaigns, result persistence and figure tables.

A run simulates the cycle dynamics for the whole campaign, synthesizes and
analyzes a readout trace only for cycles that contain an ionization, and
writes::

    events.csv       every non-empty timeline (cycle_id, time_s, transition)
    detections.csv   one fit result per ionizing cycle
    traces.bin       sampled traces, length-prefixed binary IQ records
    summary.json     estimator outputs
    manifest.json    config hash, seeds, file digests, versions, timings

Every random draw derives from the master seed through
:func:`~rfreadout.seeding.seed_fanout`, so the outputs do not depend on the
degree of parallelism.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import platform
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .circuit import (REF_LOADED_Q, REF_RESONANT_FREQUENCY, ResonatorParams, SensorTransfer,
                      fit_dip_lorentzian, frequency_sweep, matching_point, write_sweep_csv)
from .detect import (DetectConfig, ReadoutSystem, analyze_pulsed_trace,
                     find_events, fit_ionization_time, read_detections, time_resolution_curve,
                     write_detections)
from .dynamics import (EventTimeline, PhotophysicsParams, PulseSchedule, RELAX_IONIZE, RESET,
                       background_rate_for, calibrate_excitation_rate, ionization_probability,
                       simulate_campaign, simulate_cycle, write_timelines)
from .estimate import (background_threshold, fit_lifetime, fit_snr_scaling, infidelity_vs_reset,
                       measure_snr_curve, overall_fidelity, survival_table, write_curve_csv,
                       write_json)
from .seeding import (STAGE_CONTROL, STAGE_DYNAMICS, STAGE_MC, STAGE_SAMPLE, STAGE_SCREEN,
                      STAGE_TRACE, seed_fanout)
from .signals import (DEFAULT_T_INT_GRID, IQTrace, LaserTransient, TraceConfig, dc_channel,
                      synthesize_trace)

__all__ = ["ExperimentConfig", "RunManifest", "StageError", "load_config", "load_preset",
           "run_experiment", "reproduce_figure", "seed_fanout", "FIGURE_TAGS", "PRESETS"]

MODES = ("cw", "pulsed", "control")
PRESETS = ("er1", "er2", "control", "calibrated", "cw")
FIGURE_TAGS = ("fig1b", "fig2b", "fig3a", "fig3b", "fig3c", "fig4b", "fig4c")


class StageError(RuntimeError):
    """Failure tagged with the pipeline stage it occurred in."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def _stage(name: str, timings: dict | None = None):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Calibration:
    """Per-cycle probabilities the photophysics rates are solved for (None: use rates as given)."""

    target_probability: float | None = None
    background_probability: float | None = None


@dataclass(frozen=True)
class AnalysisOptions:
    t_min: float | None = None  # lifetime threshold; None derives it from a control run
    control_cycles: int = 0  # size of that control run (0: no lifetime fit without t_min)
    keep_traces: int = -1  # event traces stored; -1 keeps all
    keep_empty: int = 100  # random event-free traces stored
    min_events: int = 20


_SECTIONS = {
    "schedule": PulseSchedule, "photophysics": PhotophysicsParams, "calibration": Calibration,
    "resonator": ResonatorParams, "sensor": SensorTransfer, "trace": TraceConfig,
    "transient": LaserTransient, "detect": DetectConfig, "analysis": AnalysisOptions,
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    mode: str = "pulsed"
    n_cycles: int = 1000
    seed: int = 0
    output_dir: str = "runs/run"
    threads: int = 0  # 0: one worker per available core
    schedule: PulseSchedule = PulseSchedule()
    photophysics: PhotophysicsParams = PhotophysicsParams()
    calibration: Calibration = Calibration()
    resonator: ResonatorParams = ResonatorParams()
    sensor: SensorTransfer = SensorTransfer()
    trace: TraceConfig = TraceConfig()
    transient: LaserTransient = LaserTransient()
    detect: DetectConfig = DetectConfig()
    analysis: AnalysisOptions = AnalysisOptions()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_cycles < 1:
            raise ValueError("n_cycles must be >= 1")
        if self.mode == "control" and self.schedule.resonant:
            object.__setattr__(self, "schedule", replace(self.schedule, resonant=False))

    # -- derived objects ---------------------------------------------------

    def resolved_photophysics(self) -> PhotophysicsParams:
        """Photophysics with calibrated rates substituted."""
        p, c = self.photophysics, self.calibration
        s = self.schedule
        if c.background_probability is not None:
            p = replace(p, background_rate_per_power=background_rate_for(s, c.background_probability))
        if c.target_probability is not None and s.resonant:
            p = replace(p, excitation_rate_per_power=calibrate_excitation_rate(s, p,
                                                                               c.target_probability))
        return p

    def trace_config(self) -> TraceConfig:
        """Trace settings with the charge levels taken from the sensor transfer."""
        return replace(self.trace, level_neutral=self.sensor.level_neutral,
                       level_ionized=self.sensor.level_ionized)

    def readout(self) -> ReadoutSystem:
        return ReadoutSystem(self.trace_config(), self.schedule, self.transient, self.detect)

    def control_companion(self) -> "ExperimentConfig":
        """Non-resonant run with the same hardware, used to set the lifetime threshold."""
        return replace(self, name=self.name + "-control", mode="control",
                       n_cycles=max(self.analysis.control_cycles, 1),
                       seed=seed_fanout(self.seed, STAGE_CONTROL, 0),
                       schedule=replace(self.schedule, resonant=False),
                       calibration=replace(self.calibration, target_probability=None),
                       analysis=replace(self.analysis, control_cycles=0, t_min=None))

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if dataclasses.is_dataclass(v) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in _SECTIONS.items():
            if key in d and not dataclasses.is_dataclass(d[key]):
                sec = dict(d[key] or {})
                bad = set(sec) - {f.name for f in dataclasses.fields(typ)}
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                d[key] = typ(**sec)
        return cls(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        d = yaml.safe_load(text)
        if not isinstance(d, dict):
            raise ValueError("config file must hold a mapping")
        return cls.from_dict(d)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_yaml(fh.read())


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("rfreadout").joinpath("presets", f"{name}.yaml").read_text("utf-8")
    return ExperimentConfig.from_yaml(text)


# --------------------------------------------------------------------------
# running


@dataclass
class RunManifest:
    name: str
    config_hash: str
    master_seed: int
    stage_seeds: dict
    files: dict  # name -> {"path", "sha256"}
    versions: dict
    timings: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _analyze_batch(cfg_dict: dict, records: list, keep: set) -> list:
    """Worker: synthesize and fit the traces of a batch of ionizing cycles."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    system = cfg.readout()
    out = []
    for cid, times, transitions in records:
        tl = EventTimeline(list(times), list(transitions), cid)
        tr = synthesize_trace(tl, cfg.schedule, system.trace, cfg.transient,
                              seed_fanout(cfg.seed, STAGE_TRACE, cid))
        res = analyze_pulsed_trace(tr, system)
        out.append((res, tr.to_bytes() if cid in keep else None))
    return out


def _n_workers(threads: int) -> int:
    return threads if threads > 0 else (os.cpu_count() or 1)


def _analyze_all(cfg: ExperimentConfig, timelines, keep: set, threads: int):
    records = [(tl.cycle_id, tuple(tl.times), tuple(tl.transitions)) for tl in timelines]
    workers = min(_n_workers(threads), max(1, len(records) // 64))
    cfg_dict = cfg.to_dict()
    if workers <= 1:
        return _analyze_batch(cfg_dict, records, keep)
    size = math.ceil(len(records) / (4 * workers))
    batches = [records[i:i + size] for i in range(0, len(records), size)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(_analyze_batch, [cfg_dict] * len(batches), batches,
                            [keep] * len(batches)))
    return [r for part in parts for r in part]


def _write_traces(path, blobs) -> int:
    n = 0
    with open(path, "wb") as fh:
        for b in blobs:
            fh.write(struct.pack("<Q", len(b)))
            fh.write(b)
            n += 1
    return n


def read_traces(path) -> list[IQTrace]:
    out = []
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0
    while off < len(buf):
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
        out.append(IQTrace.from_bytes(buf[off:off + n]))
        off += n
    return out


def _ionizing(timelines):
    return [tl for tl in timelines if tl.first_ionization() is not None]


def _campaign(cfg: ExperimentConfig, p: PhotophysicsParams, timings: dict):
    with _stage("dynamics", timings):
        return simulate_campaign(cfg.schedule, p, cfg.n_cycles, cfg.seed)


def _cw_pipeline(cfg: ExperimentConfig, p: PhotophysicsParams, timings: dict):
    """Continuous illumination: every cycle is simulated and its full trace segmented."""
    system = cfg.readout()
    tcfg = replace(system.trace, pre_trigger=0.0, duration=cfg.schedule.cycle_length)
    timelines, results, blobs = [], [], []
    lag = 5.0 / (2 * math.pi * tcfg.filter_cutoff)
    base = (tcfg.level_neutral * tcfg.direction[0], tcfg.level_neutral * tcfg.direction[1])
    model = replace(system.fit_model(), trace_config=tcfg, schedule=None,
                    transient=LaserTransient(jump_amplitude=0.0, amplitude_jitter=0.0),
                    post=10e-6)
    for cid in range(cfg.n_cycles):
        with _stage("dynamics", timings):
            tl = simulate_cycle(cfg.schedule, p, seed_fanout(cfg.seed, STAGE_DYNAMICS, cid), cid)
        if not len(tl):
            continue
        timelines.append(tl)
        if tl.first_ionization() is None:
            continue
        with _stage("signal", timings):
            tr = synthesize_trace(tl, cfg.schedule, tcfg, model.transient,
                                  seed_fanout(cfg.seed, STAGE_TRACE, cid))
        with _stage("detect", timings):
            d = cfg.detect
            for c in find_events(tr, tcfg.contrast, d.threshold_fraction,
                                 release_fraction=d.release_fraction, direction=tcfg.direction,
                                 baseline=base, smoothing=d.smoothing, merge_gap=d.merge_gap):
                if c.end - c.start < lag / 5:
                    continue
                res = fit_ionization_time(tr, c, model, baseline=base)
                res.cycle_id = cid
                if c.closed and not math.isfinite(res.duration):
                    # long segments: the discriminated interval stands in for the reset fit
                    res.duration = c.end - res.t_ion
                results.append(res)
        if cfg.analysis.keep_traces < 0 or len(blobs) < cfg.analysis.keep_traces:
            blobs.append(tr.to_bytes())
    return timelines, results, blobs


def run_experiment(cfg: ExperimentConfig, *, out_dir=None, threads: int | None = None
                   ) -> RunManifest:
    """Execute the full pipeline for `cfg` and persist its outputs."""
    timings: dict = {}
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    threads = cfg.threads if threads is None else threads
    with _stage("setup", timings):
        out.mkdir(parents=True, exist_ok=True)
        p = cfg.resolved_photophysics()
    summary: dict = {"name": cfg.name, "mode": cfg.mode, "n_cycles": cfg.n_cycles,
                     "excitation_rate_per_power": p.excitation_rate_per_power,
                     "background_rate_per_power": p.background_rate_per_power}

    if cfg.mode == "cw":
        timelines, results, blobs = _cw_pipeline(cfg, p, timings)
        ionizing = _ionizing(timelines)
        closed = [r.duration for r in results if r.detected and math.isfinite(r.duration)]
        summary.update(n_ionizing_cycles=len(ionizing), n_detected=sum(r.detected for r in results),
                       n_true_ionizations=sum(len(tl.ionization_times()) for tl in ionizing),
                       mean_closed_duration=float(np.mean(closed)) if closed else None)
    else:
        timelines = _campaign(cfg, p, timings)
        ionizing = _ionizing(timelines)
        keep_n = cfg.analysis.keep_traces
        ids = [tl.cycle_id for tl in ionizing]
        keep = set(ids if keep_n < 0 else ids[:keep_n])
        with _stage("detect", timings):
            pairs = _analyze_all(cfg, ionizing, keep, threads)
        results = [r for r, _ in pairs]
        blobs = [b for _, b in pairs if b is not None]
        with _stage("signal", timings):
            blobs += _empty_traces(cfg, {tl.cycle_id for tl in timelines})
        summary.update(_pulsed_summary(cfg, p, timelines, ionizing, results, out, threads, timings))

    with _stage("write", timings):
        files = {"events": out / "events.csv", "detections": out / "detections.csv",
                 "traces": out / "traces.bin", "summary": out / "summary.json",
                 "config": out / "config.yaml"}
        write_timelines(files["events"], timelines)
        write_detections(files["detections"], results)
        _write_traces(files["traces"], blobs)
        write_json(files["summary"], summary)
        files["config"].write_text(cfg.to_yaml(), encoding="utf-8")
        manifest = RunManifest(
            name=cfg.name, config_hash=cfg.config_hash(), master_seed=cfg.seed,
            stage_seeds={name: seed_fanout(cfg.seed, sid, 0) for name, sid in
                         (("screen", STAGE_SCREEN), ("dynamics", STAGE_DYNAMICS),
                          ("trace", STAGE_TRACE), ("control", STAGE_CONTROL),
                          ("sample", STAGE_SAMPLE))},
            files={k: {"path": str(v.name), "sha256": _sha256(v)} for k, v in files.items()},
            versions={"rfreadout": __version__, "numpy": np.__version__,
                      "scipy": scipy.__version__, "python": platform.python_version()},
            timings=timings, summary=summary)
        manifest.write(out / "manifest.json")
    return manifest


def _empty_traces(cfg: ExperimentConfig, active: set) -> list[bytes]:
    n = min(cfg.analysis.keep_empty, cfg.n_cycles - len(active))
    if n <= 0:
        return []
    rng = np.random.default_rng(seed_fanout(cfg.seed, STAGE_SAMPLE, 0))
    chosen: list[int] = []
    seen = set(active)
    while len(chosen) < n:
        cid = int(rng.integers(0, cfg.n_cycles))
        if cid not in seen:
            seen.add(cid)
            chosen.append(cid)
    tcfg = cfg.trace_config()
    return [synthesize_trace(EventTimeline(cycle_id=c), cfg.schedule, tcfg, cfg.transient,
                             seed_fanout(cfg.seed, STAGE_TRACE, c)).to_bytes()
            for c in sorted(chosen)]


def _pulsed_summary(cfg, p, timelines, ionizing, results, out, threads, timings) -> dict:
    n = cfg.n_cycles
    k = len(ionizing)
    det = [r for r in results if r.detected]
    t_ion = np.array([r.t_ion for r in det])
    info = {"n_active_cycles": len(timelines), "n_ionizing_cycles": k, "n_detected": len(det),
            "ionization_probability": k / n,
            "ionization_probability_err": math.sqrt(max(k, 1) * (1 - k / n)) / n,
            "ionization_probability_analytic": ionization_probability(cfg.schedule, p)}
    if cfg.mode == "control":
        info["t_min"] = background_threshold(t_ion) if t_ion.size else None
        return info
    t_min = cfg.analysis.t_min
    if t_min is None and cfg.analysis.control_cycles > 0:
        ctrl = cfg.control_companion()
        m = run_experiment(ctrl, out_dir=out / "control", threads=threads)
        timings["control"] = sum(m.timings.values())
        t_min = m.summary.get("t_min")
        info["control"] = {"n_cycles": ctrl.n_cycles, "n_detected": m.summary["n_detected"]}
    info["t_min"] = t_min
    if t_min is not None:
        with _stage("estimate", timings):
            try:
                for method in ("mle", "lsq"):
                    info[f"lifetime_{method}"] = fit_lifetime(
                        t_ion, t_min, method, min_events=cfg.analysis.min_events).to_dict()
            except ValueError as exc:
                info["lifetime_error"] = str(exc)
    return info


# --------------------------------------------------------------------------
# figure tables


def calibrated_readout() -> ReadoutSystem:
    """Readout chain of the `calibrated` preset."""
    return load_preset("calibrated").readout()


def _rows_csv(path, header, columns) -> None:
    rows = [dict(zip(header, vals)) for vals in zip(*columns)]
    write_curve_csv(path, [{k: float(v) for k, v in r.items()} for r in rows])


def reproduce_figure(tag: str, out_dir=".", *, seed: int = 0, scale: float = 1.0) -> dict:
    """Write the plot-ready CSV table(s) for figure `tag`.

    `scale` multiplies every Monte Carlo size (cycle counts and repeats),
    so smaller values give quick previews.  Returns the written paths and
    the headline numbers.
    """
    if tag not in FIGURE_TAGS:
        raise ValueError(f"unknown figure tag {tag!r}; choose from {', '.join(FIGURE_TAGS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return _FIGURES[tag](out, seed, scale)


def _fig1b(out, seed, scale):
    p = ResonatorParams.from_resonance(REF_RESONANT_FREQUENCY, REF_LOADED_Q)
    r_match, f_match = matching_point(p)
    bw = f_match / REF_LOADED_Q
    f, g = frequency_sweep(p, r_match, f_match - 4 * bw, f_match + 4 * bw, 2001)
    path = out / "fig1b.csv"
    write_sweep_csv(path, f, g)
    f0, fwhm = fit_dip_lorentzian(f, g)
    return {"files": [str(path)], "params": {"f_r_hz": f0, "fwhm_hz": fwhm,
                                             "loaded_q": f0 / fwhm, "gamma_min": float(g.min())}}


def _fig2b(out, seed, scale):
    cfg = load_preset("cw")
    tcfg = replace(cfg.trace_config(), pre_trigger=0.0, duration=2e-3)
    tl = EventTimeline(cycle_id=0)
    for t_ion, t_reset in ((0.2e-3, 0.25e-3), (0.6e-3, 1.6e-3)):
        tl.append(t_ion, RELAX_IONIZE)
        tl.append(t_reset, RESET)
    sched = replace(cfg.schedule, cycle_length=2e-3, pulse_start=0.0, pulse_length=2e-3)
    tr = synthesize_trace(tl, sched, tcfg, LaserTransient(jump_amplitude=0.0, amplitude_jitter=0.0),
                          seed_fanout(seed, STAGE_TRACE, 0))
    rf = tr.project(tcfg.direction, (tcfg.level_neutral * tcfg.direction[0],
                                     tcfg.level_neutral * tcfg.direction[1]))
    # RF decimated to 1 MS/s by block means so both channels share the time axis
    m = int(round(1e-6 / tr.dt))
    rf_1us = rf[: rf.size // m * m].reshape(-1, m).mean(axis=1)
    t_dc, i_dc = dc_channel(tl, 2e3, start=0.0, stop=2e-3, sample_rate=1e6)
    n = min(rf_1us.size, t_dc.size)
    path = out / "fig2b.csv"
    _rows_csv(path, ["time_s", "rf_delta_v", "dc_current_a"], [t_dc[:n], rf_1us[:n], i_dc[:n]])
    base = (tcfg.level_neutral * tcfg.direction[0], tcfg.level_neutral * tcfg.direction[1])
    d = cfg.detect
    cands = find_events(tr, tcfg.contrast, d.threshold_fraction, release_fraction=d.release_fraction,
                        direction=tcfg.direction, baseline=base, smoothing=d.smoothing,
                        merge_gap=d.merge_gap)
    long = [(c.start, c.end) for c in cands if c.end - c.start > 1e-6]
    return {"files": [str(path)], "params": {"rf_intervals": long}}


def _fig3a(out, seed, scale):
    cfg = load_preset("calibrated")
    system = cfg.readout()
    cases = {"isolated": 1.8e-6, "overlapping": 0.6e-6, "merged": 0.08e-6}
    cols, fits = {}, {}
    for k, (name, t) in enumerate(cases.items()):
        tl = EventTimeline(cycle_id=k)
        tl.append(t, RELAX_IONIZE)
        tr = synthesize_trace(tl, cfg.schedule, system.trace, cfg.transient,
                              seed_fanout(seed, STAGE_TRACE, k))
        base = tr.baseline(-5e-6, 0.0)
        cols["time_s"] = tr.times
        cols[name] = tr.project(system.trace.direction, base)
        res = analyze_pulsed_trace(tr, system)
        fits[name] = {"true_t_ion": t, "fitted_t_ion": res.t_ion, "sigma_t": res.sigma_t,
                      "detected": res.detected}
    path = out / "fig3a.csv"
    sel = (cols["time_s"] >= -1e-6) & (cols["time_s"] <= 4e-6)
    _rows_csv(path, list(cols), [v[sel] for v in cols.values()])
    return {"files": [str(path)], "params": fits}


def _fig3b(out, seed, scale):
    system = calibrated_readout()
    grid = np.array([0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 1.0, 1.5, 2.0, 3.0]) * 1e-6
    n_mc = max(20, int(1000 * scale))
    c = time_resolution_curve(grid, system, n_mc, seed)
    path = out / "fig3b.csv"
    _rows_csv(path, ["t_ion_s", "rms_s", "rms_err_s", "bias_s", "median_sigma_fit_s"],
              [c.t_ion, c.rms, c.rms_err, c.bias, c.sigma_fit])
    plateau = c.rms[c.t_ion >= 1e-6]
    return {"files": [str(path)], "params": {"plateau_rms_s": float(np.mean(plateau)),
                                             "n_mc": n_mc}}


def _fig3c(out, seed, scale):
    runs = {}
    for name in ("control", "er2", "er1"):
        cfg = load_preset(name)
        cfg = replace(cfg, seed=seed_fanout(seed, STAGE_MC, len(runs)),
                      n_cycles=max(1000, int(cfg.n_cycles * scale)),
                      analysis=replace(cfg.analysis, keep_traces=0, keep_empty=0, control_cycles=0,
                                       t_min=None))
        runs[name] = run_experiment(cfg, out_dir=out / f"fig3c_{name}", threads=cfg.threads)
    t_min = runs["control"].summary["t_min"]
    grid = np.arange(0.0, 3e-6 + 1e-12, 10e-9)
    times = {}
    for name in runs:
        det = read_detections(out / f"fig3c_{name}" / "detections.csv")
        times[name] = np.array([r.t_ion for r in det if r.detected])
    params = {"t_min": t_min, "n_events": {k: int(v.size) for k, v in times.items()}}
    cols = [grid] + [survival_table(times[k], grid) for k in ("er2", "control", "er1")]
    header = ["t_s", "N_er2", "N_control", "N_er1"]
    if t_min is not None and np.sum(times["er2"] > t_min) >= 20:
        fit = fit_lifetime(times["er2"], t_min, "lsq")
        n0 = np.sum(times["er2"] > t_min)
        cols.append(np.where(grid >= t_min, n0 * np.exp(-(grid - t_min) / fit.tau), np.nan))
        header.append("N_er2_fit")
        params["lifetime_lsq"] = fit.to_dict()
        params["lifetime_mle"] = fit_lifetime(times["er2"], t_min, "mle").to_dict()
        params["n_selected"] = int(n0)
    path = out / "fig3c.csv"
    _rows_csv(path, header, cols)
    return {"files": [str(path)], "params": params}


def _fig4b(out, seed, scale):
    system = calibrated_readout()
    t_ints = np.array(DEFAULT_T_INT_GRID + (3e-6,))
    snr = measure_snr_curve(system.trace, t_ints, max(1000, int(10_000 * scale)), seed)
    fit = fit_snr_scaling(t_ints, snr)
    path = out / "fig4b.csv"
    _rows_csv(path, ["t_int_s", "snr", "snr_fit"], [t_ints, snr, fit.predict(t_ints)])
    return {"files": [str(path)], "params": {"snr_1us": fit.snr_1us, "t0_s": fit.t0,
                                             "snr_1us_err": fit.snr_1us_err, "t0_err_s": fit.t0_err}}


FIDELITY_GRID = tuple(np.array([0.02, 0.04, 0.06, 0.08, 0.1, 0.13, 0.17, 0.22, 0.3, 0.5, 1.0]) * 1e-6)


def _fig4c(out, seed, scale):
    system = calibrated_readout()
    n_mc = max(50, int(1000 * scale))
    c = infidelity_vs_reset(FIDELITY_GRID, system, n_mc, seed)
    path = out / "fig4c.csv"
    write_curve_csv(path, c.to_rows())
    fid = overall_fidelity(c.duration, c.infidelity, load_preset("er2").photophysics.reset_time_constant)
    return {"files": [str(path)], "params": {
        "infidelity_170ns": float(np.interp(170e-9, c.duration, c.infidelity)),
        "overall_fidelity": fid, "false_positive": c.false_positive, "n_mc": n_mc}}


_FIGURES = {"fig1b": _fig1b, "fig2b": _fig2b, "fig3a": _fig3a, "fig3b": _fig3b,
            "fig3c": _fig3c, "fig4b": _fig4b, "fig4c": _fig4c}

