"""Acceptance criteria 1-8, each run at its stated tolerance.

Every test appends one ``[PASS]``/``[FAIL]`` line to the report printed at
the end of the session, then asserts.  Run this file directly for the
acceptance report alone.
"""
import math
import sys
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from rfreadout.circuit import resonant_frequency, resonator_bandwidth
from rfreadout.detect import time_resolution_curve
from rfreadout.dynamics import (IONIZING, RESET, PhotophysicsParams, PulseSchedule,
                                background_rate_for, calibrate_excitation_rate,
                                ionization_probability, simulate_campaign, simulate_cycle)
from rfreadout.estimate import (compute_snr, expected_short_fraction, fit_lifetime,
                                fit_snr_scaling, infidelity_vs_reset, measure_snr_curve,
                                overall_fidelity, short_event_fraction)
from rfreadout.harness import FIDELITY_GRID, load_preset, run_experiment
from rfreadout.signals import calibrate_noise, calibrate_snr_law, filter_array

from conftest import ACCEPTANCE_LINES

TAU_EX = 492e-9
TAU_RESET = 70.9e-6


def report(n: int, ok: bool, text: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}")


# 1 -------------------------------------------------------------------------


def test_criterion_1_formula_exactness():
    res = load_preset("calibrated").resonator
    mpmath.mp.dps = 50
    L, C = mpmath.mpf(res.inductance), mpmath.mpf(res.parasitic_capacitance)
    f_ref = 1 / (2 * mpmath.pi * mpmath.sqrt(L * C))
    f = resonant_frequency(res)
    err_f = abs((mpmath.mpf(f) - f_ref) / f_ref)
    bw = resonator_bandwidth(336.1e6, 65)
    bw_ref = mpmath.mpf(336.1e6) / 65
    err_bw = abs((mpmath.mpf(bw) - bw_ref) / bw_ref)
    ok = err_f < 1e-12 and err_bw < 1e-12 and round(bw / 1e6, 2) == 5.17 \
        and round(bw / 1e6, 1) == 5.2
    report(1, ok, f"f_r rel err {float(err_f):.1e}, bandwidth {bw / 1e6:.4f} MHz "
                  f"(rel err {float(err_bw):.1e}; expected 5.17, quoted 5.2)")
    assert ok


# 2 -------------------------------------------------------------------------


def test_criterion_2_lifetime_recovery(tmp_path):
    cfg = load_preset("er2")
    m = run_experiment(cfg, out_dir=tmp_path, threads=1)
    s = m.summary
    mle, lsq = s.get("lifetime_mle"), s.get("lifetime_lsq")
    assert mle and lsq, s.get("lifetime_error", "lifetime fit missing")
    n_sel = mle["n_selected"]
    dev = abs(mle["tau"] - TAU_EX) / mle["sigma"]
    comb = math.hypot(mle["sigma"], lsq["sigma"])
    agree = abs(mle["tau"] - lsq["tau"]) / comb
    ok = n_sel >= 800 and dev < 3 and agree < 2
    report(2, ok, f"{n_sel} events after t_min={s['t_min'] * 1e9:.0f} ns; "
                  f"tau_MLE={mle['tau'] * 1e9:.1f}+-{mle['sigma'] * 1e9:.1f} ns ({dev:.2f} sigma "
                  f"from 492), tau_LSQ={lsq['tau'] * 1e9:.1f}+-{lsq['sigma'] * 1e9:.1f} ns "
                  f"(MLE-LSQ {agree:.2f} combined sigma)")
    assert ok


# 3 -------------------------------------------------------------------------


def test_criterion_3_snr_law():
    base = replace(load_preset("calibrated").trace_config(), noise_sigma=0.0, contrast_fluctuation=0.0)
    law = calibrate_snr_law(9.6, 0.5e-6, base)
    sigma = calibrate_noise(9.6, base.contrast, law, t0=0.5e-6, n_windows=100_000, seed=31)
    cfg = replace(law, noise_sigma=sigma)
    t = np.array([0.25, 0.5, 1.0, 2.0, 4.0]) * 1e-6
    snr = measure_snr_curve(cfg, t, n_windows=10_000, seed=32)
    fit = fit_snr_scaling(t, snr)
    e1 = abs(fit.snr_1us / 9.6 - 1)
    e2 = abs(fit.t0 / 0.5e-6 - 1)
    ok = e1 < 0.05 and e2 < 0.15
    report(3, ok, f"SNR_1us={fit.snr_1us:.2f} ({e1:.1%} off 9.6), t0={fit.t0 * 1e6:.3f} us "
                  f"({e2:.1%} off 0.5 us)")
    assert ok


# 4 -------------------------------------------------------------------------


def test_criterion_4_short_event_fraction():
    # one certain ionization per cycle, cycles long enough that no reset is cut off
    s = PulseSchedule(cycle_length=5e-3)
    p = PhotophysicsParams(background_rate_per_power=background_rate_for(s, 0.999),
                           reset_time_constant=TAU_RESET)
    durations = []
    first = 0
    while len(durations) < 100_000:
        for tl in simulate_campaign(s, p, 20_000, seed=44, first_cycle=first):
            durations += [b - a for a, b in tl.ionized_intervals() if b is not None]
        first += 20_000
    d = np.array(durations[:100_000])
    frac = short_event_fraction(d, 0.5e-6)
    p0 = expected_short_fraction(TAU_RESET, 0.5e-6)
    se = math.sqrt(p0 * (1 - p0) / d.size)
    z = (frac - p0) / se
    ok = abs(z) < 3 and round(p0 * 100, 1) == 0.7
    report(4, ok, f"{frac:.4%} of {d.size} durations < 0.5 us vs {p0:.4%} expected "
                  f"({z:+.2f} binomial sigma; quoted 0.7%)")
    assert ok


# 5 -------------------------------------------------------------------------


def test_criterion_5_fidelity(calib_system):
    fc = infidelity_vs_reset(FIDELITY_GRID, calib_system, n_mc=1000, seed=55)
    p, e = fc.infidelity, fc.infidelity_err
    # non-increasing within bootstrap error of the step
    rises = np.diff(p) - 2 * np.hypot(e[1:], e[:-1])
    mono = bool(np.all(rises <= 0))
    i170 = int(np.argmin(np.abs(fc.duration - 170e-9)))
    p170 = p[i170]
    F = overall_fidelity(fc.duration, p, TAU_RESET)
    ok = mono and 0.003 <= p170 <= 0.03 and F >= 0.999
    curve = ", ".join(f"{d * 1e9:.0f}:{v:.3f}" for d, v in zip(fc.duration, p))
    report(5, ok, f"monotone={mono}; infidelity(170 ns)={p170:.2%} (+-{e[i170]:.2%}); "
                  f"overall fidelity {F:.4%}; false-positive rate {fc.false_positive:.1%} "
                  f"per window; curve ns:p {curve}")
    assert ok


# 6 -------------------------------------------------------------------------

RES_GRID = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 1.0, 1.3, 1.6, 2.0, 2.5, 3.0]) * 1e-6


def test_criterion_6_time_resolution(calib_system):
    rc = time_resolution_curve(RES_GRID, calib_system, n_mc=1000, seed=66)
    iso = RES_GRID >= 1.5e-6
    plateau = float(np.sqrt(np.mean(rc.rms[iso] ** 2)))
    plateau_ok = 39e-9 <= plateau <= 73e-9
    win = (RES_GRID >= 0.3e-6) & (RES_GRID <= 0.7e-6)
    k = int(np.flatnonzero(win)[np.argmax(rc.rms[win])])
    before = rc.rms[RES_GRID < 0.3e-6]
    after = rc.rms[RES_GRID > 0.7e-6]
    margin = 3 * rc.rms_err[k]
    hump_ok = rc.rms[k] > before.max() + margin and rc.rms[k] > after[0] + margin \
        and rc.rms[k] > plateau + margin

    quiet = replace(calib_system, trace=replace(calib_system.trace, noise_sigma=0.0,
                                                contrast_fluctuation=0.0),
                    transient=replace(calib_system.transient, amplitude_jitter=0.0))
    floor = time_resolution_curve(RES_GRID, quiet, n_mc=3, seed=67)
    floor_max = float(np.max(floor.rms))
    floor_ok = floor_max < 1e-9 and not floor.n_failed.any()

    ok = plateau_ok and hump_ok and floor_ok
    curve = ", ".join(f"{t * 1e6:.1f}:{r * 1e9:.0f}" for t, r in zip(RES_GRID, rc.rms))
    report(6, ok, f"plateau RMS {plateau * 1e9:.1f} ns (target [39, 73]: "
                  f"{'ok' if plateau_ok else 'outside'}); local max {rc.rms[k] * 1e9:.1f} ns at "
                  f"{RES_GRID[k] * 1e6:.1f} us ({'ok' if hump_ok else 'absent'}); noiseless floor "
                  f"{floor_max * 1e12:.1f} ps; curve us:ns {curve}")
    assert plateau_ok, f"plateau {plateau * 1e9:.1f} ns outside [39, 73] ns"
    assert hump_ok and floor_ok


# 7 -------------------------------------------------------------------------


def test_criterion_7_oracle_equivalence():
    nominal = PulseSchedule()
    p = PhotophysicsParams()
    p = replace(p, excitation_rate_per_power=calibrate_excitation_rate(nominal, p, 0.02),
                background_rate_per_power=background_rate_for(nominal, 0.004))
    rng = np.random.default_rng(77)
    n = 1_000_000
    worst = 0.0
    for power in (1.0, 7.6, 20.0):
        for length in (30e-9, 100e-9, 300e-9):
            s = replace(nominal, power=power, pulse_length=length)
            pa = ionization_probability(s, p)
            k = sum(simulate_cycle(s, p, rng).first_ionization() is not None for _ in range(n))
            z = abs(k / n - pa) / math.sqrt(pa * (1 - pa) / n)
            worst = max(worst, z)
    ok = worst < 3
    report(7, ok, f"9 (power, length) points, 1e6 cycles each: worst deviation {worst:.2f} SE")
    assert ok


# 8 -------------------------------------------------------------------------


def _parity_ok():
    s = PulseSchedule(cycle_length=200e-6)
    p = PhotophysicsParams(background_rate_per_power=background_rate_for(s, 0.5),
                           reset_time_constant=30e-9)
    s_long = replace(s, pulse_length=2e-6)
    rng = np.random.default_rng(81)
    for _ in range(2000):
        seq = [tr for tr in simulate_cycle(s_long, p, rng).transitions
               if tr in IONIZING or tr == RESET]
        if any((tr == RESET) != (i % 2 == 1) for i, tr in enumerate(seq)):
            return False
    return True


def _selection_ok():
    rng = np.random.default_rng(82)
    late = 0.343e-6 + rng.exponential(TAU_EX, 600)
    both = np.concatenate([rng.uniform(0, 0.343e-6, 300), late])
    return all(fit_lifetime(late, 0.343e-6, m) == replace(fit_lifetime(both, 0.343e-6, m),
                                                         n_total=late.size)
               for m in ("mle", "lsq"))


def _rotation_ok():
    rng = np.random.default_rng(83)
    a, b = rng.normal(size=(500, 2)), rng.normal(size=(500, 2)) + [1.5, 0.5]
    ref = compute_snr(a, b)
    for ang in np.linspace(0.1, 6.2, 12):
        R = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
        if not math.isclose(compute_snr(a @ R.T, b @ R.T), ref, rel_tol=1e-9):
            return False
    return True


def _filter_ok():
    dt = 2e-8
    dc = filter_array(np.full(2000, 2.5), 2e6, dt)
    rng = np.random.default_rng(84)
    x1, x2 = rng.normal(size=1000), rng.normal(size=1000)
    lin = filter_array(3 * x1 + x2, 2e6, dt, initial=0.0) - \
        3 * filter_array(x1, 2e6, dt, initial=0.0) - filter_array(x2, 2e6, dt, initial=0.0)
    return np.allclose(dc, 2.5, rtol=1e-13) and np.max(np.abs(lin)) < 1e-12


def _reproducible_ok(tmp_path):
    cfg = replace(load_preset("calibrated"), n_cycles=20_000, seed=85)
    cfg = replace(cfg, calibration=replace(cfg.calibration, target_probability=0.01))
    a = run_experiment(cfg, out_dir=tmp_path / "a", threads=1)
    b = run_experiment(cfg, out_dir=tmp_path / "b", threads=2)
    return all(a.files[k]["sha256"] == b.files[k]["sha256"] for k in a.files)


def test_criterion_8_properties(tmp_path):
    checks = {"parity": _parity_ok(), "selection": _selection_ok(), "rotation": _rotation_ok(),
              "filter": _filter_ok(), "reproducibility": _reproducible_ok(tmp_path)}
    ok = all(checks.values())
    report(8, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
