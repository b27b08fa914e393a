"""Simulation, sublinear expectations and stability certificates for SDEs driven by G-Levy processes."""
from .uncertainty import (ControlPath, JumpMap, JumpMeasure, UncertaintySet, ValidationError,
                          ValidationReport, extreme_controls, g_functional, transport_map, validate)
from .noise import NoiseRealization, TimeGrid, levy_ito_integral, sample_noise, sample_noise_batch
from .sde import (Coefficients, ConvergenceError, DivergenceError, SdePath, euler_solve,
                  moduli_ode_check, picard_solve, simulate)
from .expectation import (CoordinateAscent, ElementaryIntegrand, Functional, SublinearEstimate,
                          bdg_check, capacity_estimate, estimate_sublinear, iterated_expectation,
                          markov_bound_check)
from .lyapunov import (Domain, LyapunovFunction, StabilityCertificate, certify,
                       check_condition_c, decay_fit, lv_operator, quasi_sure_rate)

__all__ = [
    "ControlPath", "JumpMap", "JumpMeasure", "UncertaintySet", "ValidationError",
    "ValidationReport", "extreme_controls", "g_functional", "transport_map", "validate",
    "NoiseRealization", "TimeGrid", "levy_ito_integral", "sample_noise", "sample_noise_batch",
    "Coefficients", "ConvergenceError", "DivergenceError", "SdePath", "euler_solve",
    "moduli_ode_check", "picard_solve", "simulate",
    "CoordinateAscent", "ElementaryIntegrand", "Functional", "SublinearEstimate", "bdg_check",
    "capacity_estimate", "estimate_sublinear", "iterated_expectation", "markov_bound_check",
    "Domain", "LyapunovFunction", "StabilityCertificate", "certify", "check_condition_c",
    "decay_fit", "lv_operator", "quasi_sure_rate",
]
