"""Simulation and analysis of RF-reflectometry photoionization readout of single ions."""

__version__ = "0.1.0"

from .circuit import (ResonatorParams, SensorTransfer, reflection_magnitude, resonant_frequency,
                      resonator_bandwidth, sensor_level)
from .detect import (DetectConfig, DetectionResult, FitModel, ReadoutSystem, analyze_pulsed_trace,
                     find_events, fit_ionization_time, time_resolution_curve)
from .dynamics import (EventTimeline, PhotophysicsParams, PulseSchedule, ionization_probability,
                       simulate_campaign, simulate_cycle, survival_counts)
from .estimate import (LifetimeFit, SnrFit, background_threshold, compute_snr, fit_lifetime,
                       fit_snr_scaling, infidelity_vs_reset, overall_fidelity)
from .harness import ExperimentConfig, RunManifest, reproduce_figure, run_experiment
from .seeding import seed_fanout
from .signals import (IQTrace, LaserTransient, TraceConfig, calibrate_noise, dc_channel, lowpass,
                      synthesize_trace)
