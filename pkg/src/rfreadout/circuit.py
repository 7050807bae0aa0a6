"""Lumped-element readout resonator and charge-sensor transfer.

The tank is a series inductor feeding the device resistance in parallel
with the parasitic capacitance.  The sensor transfer maps the trap charge
state and gate voltage onto the reflected amplitude through a
thermally broadened Coulomb peak.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

Charge = Literal["q0", "q+"]

#: Inductance and parasitic capacitance of the measured tank circuit.
REF_INDUCTANCE = 470e-9
REF_PARASITIC_CAPACITANCE = 490.1e-15
REF_RESONANT_FREQUENCY = 336.1e6
REF_LOADED_Q = 65.0


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not value > 0 or not math.isfinite(value):
            raise ValueError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class ResonatorParams:
    inductance: float = REF_INDUCTANCE
    parasitic_capacitance: float = REF_PARASITIC_CAPACITANCE
    loaded_quality_factor: float = REF_LOADED_Q
    line_impedance: float = 50.0
    device_resistance_neutral: float = 20e3
    device_resistance_ionized: float = 22e3

    def __post_init__(self):
        _require_positive(
            inductance=self.inductance,
            parasitic_capacitance=self.parasitic_capacitance,
            loaded_quality_factor=self.loaded_quality_factor,
            line_impedance=self.line_impedance,
            device_resistance_neutral=self.device_resistance_neutral,
            device_resistance_ionized=self.device_resistance_ionized,
        )
        if self.loaded_quality_factor <= 1:
            raise ValueError("loaded_quality_factor must exceed 1")
        if self.device_resistance_neutral == self.device_resistance_ionized:
            raise ValueError("device resistance must differ between charge states")

    @classmethod
    def from_resonance(cls, f_r: float, q_loaded: float, line_impedance: float = 50.0,
                       resistance_step: float = 0.1) -> "ResonatorParams":
        """Choose L and C_p so that the matched tank resonates at `f_r` with
        loaded quality factor `q_loaded`.

        At critical coupling the device branch presents ``Z0`` in series, so
        ``Q = omega L / (2 Z0)``.  The neutral-state resistance is set to the
        matching value and the ionized one is offset by `resistance_step`.
        """
        _require_positive(f_r=f_r, q_loaded=q_loaded, line_impedance=line_impedance)
        w = 2 * math.pi * f_r
        L = 2 * line_impedance * q_loaded / w
        # matched frequency satisfies w^2 = 1/(L C) - Z0^2/L^2
        C = 1.0 / (L * (w**2 + (line_impedance / L) ** 2))
        r_match = L / (C * line_impedance)
        return cls(L, C, q_loaded, line_impedance, r_match, r_match * (1 + resistance_step))

    def resistance(self, charge: Charge) -> float:
        return self.device_resistance_neutral if charge == "q0" else self.device_resistance_ionized


def resonant_frequency(p: ResonatorParams | None = None, *, inductance: float | None = None,
                       capacitance: float | None = None) -> float:
    """Return ``1 / (2 pi sqrt(L C_p))`` in hertz."""
    L = inductance if inductance is not None else p.inductance
    C = capacitance if capacitance is not None else p.parasitic_capacitance
    _require_positive(inductance=L, capacitance=C)
    return 1.0 / (2 * math.pi * math.sqrt(L * C))


def resonator_bandwidth(f_r: float, q_r: float) -> float:
    _require_positive(f_r=f_r, q_r=q_r)
    return f_r / q_r


def input_impedance(f, p: ResonatorParams, r_device: float):
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    if r_device < 0:
        raise ValueError("device resistance must be non-negative")
    w = 2 * np.pi * f
    z_c = 1.0 / (1j * w * p.parasitic_capacitance)
    z_dev = r_device * z_c / (r_device + z_c) if r_device > 0 else 0.0 * z_c
    return 1j * w * p.inductance + z_dev


def reflection_coefficient(f, p: ResonatorParams, r_device: float):
    z = input_impedance(f, p, r_device)
    return (z - p.line_impedance) / (z + p.line_impedance)


def reflection_magnitude(f, p: ResonatorParams, r_device: float):
    """|Gamma(f)| of the tank for a device resistance `r_device` (ohm)."""
    g = np.abs(reflection_coefficient(f, p, r_device))
    return float(g) if np.ndim(g) == 0 else g


def matching_point(p: ResonatorParams) -> tuple[float, float]:
    """Return ``(R_device, f)`` giving a perfect match, ``Gamma = 0``.

    Exists only when ``L > C_p Z0**2``.
    """
    L, C, z0 = p.inductance, p.parasitic_capacitance, p.line_impedance
    w2 = 1.0 / (L * C) - (z0 / L) ** 2
    if w2 <= 0:
        raise ValueError("tank cannot be matched to the line")
    return L / (C * z0), math.sqrt(w2) / (2 * math.pi)


def frequency_sweep(p: ResonatorParams, r_device: float, f_lo: float, f_hi: float,
                    n: int = 2001) -> tuple[np.ndarray, np.ndarray]:
    f = np.linspace(f_lo, f_hi, n)
    return f, reflection_magnitude(f, p, r_device)


def write_sweep_csv(path, freqs, gamma) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency_hz", "gamma_magnitude"])
        for f, g in zip(freqs, gamma):
            w.writerow([repr(float(f)), repr(float(g))])


def fit_dip_lorentzian(freqs, gamma) -> tuple[float, float]:
    """Fit ``1 - |Gamma|^2`` with a Lorentzian; return ``(f_center, fwhm)``."""
    from scipy.optimize import curve_fit

    freqs = np.asarray(freqs, float)
    absorbed = 1.0 - np.asarray(gamma, float) ** 2

    def lorentz(f, a, f0, hw, c):
        return a / (1 + ((f - f0) / hw) ** 2) + c

    i0 = int(np.argmax(absorbed))
    half = absorbed[i0] / 2
    above = np.nonzero(absorbed > half)[0]
    hw0 = max((freqs[above[-1]] - freqs[above[0]]) / 2, freqs[1] - freqs[0])
    popt, _ = curve_fit(lorentz, freqs, absorbed, p0=[absorbed[i0], freqs[i0], hw0, 0.0])
    return float(popt[1]), float(2 * abs(popt[2]))


# --------------------------------------------------------------------------
# charge sensor


@dataclass(frozen=True)
class SensorTransfer:
    """Coulomb-peak transfer ``|V_R|(V_g)`` for the two trap charge states.

    The ionized-state curve is the neutral one shifted by `charge_shift`
    along the gate axis.  Amplitudes are in volts of demodulated signal.
    """

    peak_center: float = 0.0
    peak_width: float = 1e-3
    peak_height: float = 40e-3
    baseline: float = 20e-3
    charge_shift: float = -0.5e-3
    operating_point: float | None = None

    def __post_init__(self):
        if not self.peak_width > 0:
            raise ValueError("peak_width must be positive")
        if self.operating_point is None:
            object.__setattr__(self, "operating_point", self.steepest_flank())
        if self.charge_shift != 0 and self.level_neutral == self.level_ionized:
            raise ValueError("operating point gives no charge contrast")

    def lineshape(self, v_g):
        x = (np.asarray(v_g, float) - self.peak_center) / self.peak_width
        return self.baseline + self.peak_height / np.cosh(x) ** 2

    def steepest_flank(self) -> float:
        """Gate voltage of maximal |slope| on the high-voltage flank."""
        return self.peak_center + self.peak_width * math.atanh(1 / math.sqrt(3))

    @property
    def level_neutral(self) -> float:
        return float(sensor_level("q0", self.operating_point, self))

    @property
    def level_ionized(self) -> float:
        return float(sensor_level("q+", self.operating_point, self))

    @property
    def contrast(self) -> float:
        """Signed change ``level_ionized - level_neutral``."""
        return self.level_ionized - self.level_neutral

    @classmethod
    def for_contrast(cls, contrast: float, *, peak_width: float = 1e-3,
                     charge_shift: float = -0.5e-3, baseline: float = 20e-3,
                     peak_center: float = 0.0) -> "SensorTransfer":
        """Scale the peak height so the steepest-flank contrast equals `contrast`."""
        unit = cls(peak_center, peak_width, 1.0, 0.0, charge_shift)
        return cls(peak_center, peak_width, contrast / unit.contrast, baseline, charge_shift)


def sensor_level(charge: Charge, v_g, s: SensorTransfer):
    """Reflected amplitude for trap charge `charge` at gate voltage `v_g`."""
    if charge == "q0":
        out = s.lineshape(v_g)
    elif charge == "q+":
        out = s.lineshape(np.asarray(v_g, float) - s.charge_shift)
    else:
        raise ValueError(f"unknown charge state {charge!r}")
    return float(out) if np.ndim(out) == 0 else out


def reference_sensor() -> SensorTransfer:
    """Sensor biased for the -12 mV ionization contrast seen in pulsed traces."""
    return SensorTransfer.for_contrast(-12e-3)
