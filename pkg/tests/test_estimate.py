import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfreadout.estimate import (background_threshold, compute_snr, er_induced_fraction,
                                expected_background, expected_short_fraction, fit_lifetime,
                                fit_snr_scaling, filtered_peak, overall_fidelity,
                                short_event_fraction, survival_table, write_curve_csv)
from rfreadout.signals import TraceConfig, snr_law


def test_background_threshold():
    assert background_threshold([1e-7, 3.43e-7, 2e-7]) == 3.43e-7
    assert background_threshold([5e-8]) == 5e-8
    with pytest.raises(ValueError):
        background_threshold([])


def test_background_bookkeeping():
    assert expected_background(6e-5, 7_600_000) == pytest.approx(456)
    assert er_induced_fraction(2280, 6e-5, 7_600_000) == pytest.approx(0.8)


def test_mle_closed_form():
    x = np.array([1.0, 2.0, 4.0, 9.0] * 10) * 1e-7
    f = fit_lifetime(list(x + 3e-7) + [1e-7, 2e-7], 3e-7, "mle")
    assert f.tau == pytest.approx(x.mean(), rel=1e-12)
    assert f.sigma == pytest.approx(x.mean() / math.sqrt(40), rel=1e-12)
    assert f.n_selected == 40 and f.n_total == 42


def test_too_few_events():
    with pytest.raises(ValueError):
        fit_lifetime([1e-6] * 5, 0.0)
    with pytest.raises(ValueError):
        fit_lifetime(np.linspace(1e-7, 1e-6, 50), 0.0, "median")


def test_selection_invariance():
    rng = np.random.default_rng(0)
    late = 3.43e-7 + rng.exponential(492e-9, 800)
    early = rng.uniform(0, 3.43e-7, 300)
    for m in ("mle", "lsq"):
        a = fit_lifetime(late, 3.43e-7, m)
        b = fit_lifetime(np.concatenate([early, late]), 3.43e-7, m)
        assert a.tau == b.tau and a.sigma == b.sigma


def test_lsq_exact_on_noiseless_survival():
    # quantiles of an exponential: survival counts follow the law exactly
    n, tau = 20_000, 500e-9
    t = -tau * np.log(1 - (np.arange(n) + 0.5) / n)
    f = fit_lifetime(t, 0.0, "lsq", min_count=200)
    assert f.tau == pytest.approx(tau, rel=0.01)


@pytest.mark.parametrize("seed", range(5))
def test_mle_and_lsq_agree(seed):
    rng = np.random.default_rng(seed)
    t = 3.43e-7 + rng.exponential(492e-9, 1500)
    a = fit_lifetime(t, 3.43e-7, "mle")
    b = fit_lifetime(t, 3.43e-7, "lsq")
    assert abs(a.tau - 492e-9) < 3 * a.sigma
    assert abs(a.tau - b.tau) < 2 * a.sigma
    assert b.sigma < a.sigma


def test_survival_table():
    np.testing.assert_array_equal(survival_table([1, 2, 2, 5], [0, 1, 2, 4, 6]), [4, 3, 1, 1, 0])


def test_snr_limits():
    a = np.zeros((10, 2))
    b = np.tile([1.0, 0.0], (10, 1))
    assert compute_snr(a, b) == math.inf
    rng = np.random.default_rng(1)
    c = rng.normal(size=(100, 2))
    assert compute_snr(c, c.copy()) == 0.0
    with pytest.raises(ValueError):
        compute_snr(a[:1], b)


def test_snr_gaussian_oracle():
    rng = np.random.default_rng(2)
    a = rng.normal(0.0, 1.0, size=(200_000, 2))
    b = rng.normal(0.0, 1.0, size=(200_000, 2)) + [3.0, 4.0]
    assert compute_snr(a, b) == pytest.approx(5.0, rel=0.01)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_snr_rigid_motion_invariance(angle, dx, dy):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(300, 2))
    b = rng.normal(size=(300, 2)) * 0.7 + [2.0, -1.0]
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    ref = compute_snr(a, b)
    moved = compute_snr(a @ R.T + [dx, dy], b @ R.T + [dx, dy])
    assert moved == pytest.approx(ref, rel=1e-7)


def test_snr_fit_roundtrip():
    t = np.array([0.25, 0.5, 1, 2, 4]) * 1e-6
    f = fit_snr_scaling(t, snr_law(t, 9.6, 0.5e-6))
    assert f.snr_1us == pytest.approx(9.6, rel=1e-6)
    assert f.t0 == pytest.approx(0.5e-6, rel=1e-5)
    assert f.predict(1.5e-6) == pytest.approx(13.6, abs=0.05)
    assert np.all(np.diff(f.predict(np.linspace(0, 1e-5, 50))) > 0)


def test_snr_fit_degenerate():
    with pytest.raises(ValueError):
        fit_snr_scaling([1e-6] * 4, [9.0, 9.1, 8.9, 9.0])
    with pytest.raises(ValueError):
        fit_snr_scaling([1e-6, 2e-6], [9.0, 12.0])


def test_filtered_peak_first_order():
    cfg = TraceConfig()
    tau = 1 / (2 * math.pi * cfg.filter_cutoff)
    for d in (0.04e-6, 0.17e-6, 1e-6):
        # a rectangle is an average over the sample grid, so allow one sample of smear
        assert filtered_peak(d, cfg) == pytest.approx(-math.expm1(-d / tau), abs=0.02)


def test_overall_fidelity_bounds():
    d = np.array([0.0, 0.1, 0.5, 1.0]) * 1e-6
    assert overall_fidelity(d, np.zeros(4), 70.9e-6) == pytest.approx(1.0, abs=1e-12)
    assert overall_fidelity(d, np.ones(4), 70.9e-6) == pytest.approx(0.0, abs=1e-12)
    d2 = d[1:]
    assert overall_fidelity(d2, np.zeros(3), 70.9e-6) == pytest.approx(math.exp(-0.1 / 70.9),
                                                                        rel=1e-12)
    with pytest.raises(ValueError):
        overall_fidelity([1e-7], [0.0], 70.9e-6)


def test_overall_fidelity_step_oracle():
    tau, D = 70.9e-6, 0.17e-6
    d = np.array([0.0, D, D + 1e-13, 1e-6])
    F = overall_fidelity(d, [1.0, 1.0, 0.0, 0.0], tau)
    assert F == pytest.approx(math.exp(-D / tau), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5), st.lists(st.floats(0, 1), min_size=5,
                                                                     max_size=5))
def test_overall_fidelity_dominance(p, q):
    d = np.array([0.02, 0.1, 0.17, 0.3, 1.0]) * 1e-6
    lo, hi = np.minimum(p, q), np.maximum(p, q)
    assert overall_fidelity(d, lo, 70.9e-6) >= overall_fidelity(d, hi, 70.9e-6) - 1e-12


def test_short_event_fraction():
    # reference value: 0.70 % of resets take less than 0.5 us
    assert expected_short_fraction(70.9e-6) == pytest.approx(0.0070, abs=0.00005)
    rng = np.random.default_rng(4)
    d = rng.exponential(70.9e-6, 1_000_000)
    p = expected_short_fraction(70.9e-6)
    assert abs(short_event_fraction(d) - p) < 3 * math.sqrt(p * (1 - p) / d.size)
    with pytest.raises(ValueError):
        short_event_fraction([])


def test_write_curve_empty(tmp_path):
    with pytest.raises(ValueError):
        write_curve_csv(tmp_path / "x.csv", [])
