"""Toolkit for dispersive single-shot spin readout of a double quantum dot.

Simulates six-state (spin x fluctuator) hidden-Markov readout traces,
classifies them with threshold or forward-backward methods, evaluates
fidelity/visibility/recall metrics, and fits the closed-form sensor and
signal-distribution models.
"""

__version__ = "0.1.0"

from .analytic import (
    AnalyticFidelityReport,
    DensityParams,
    analytic_fidelity,
    combined_density,
    decay_tail,
    electrical_fidelity,
    fidelity_from_snr,
    fit_histogram,
    sigma_of_t,
    singlet_density,
    triplet_density,
)
from .fitting import FitResult, MODEL_REGISTRY, PhysicsModel, fit_model, poisson_weights
from .markov import (
    EmissionModel,
    HmmParams,
    Posterior,
    RateSet,
    SpinState,
    TlfState,
    Trace,
    TraceBatch,
    ZeroLikelihoodError,
    brute_force_posterior,
    build_generator,
    em_fit,
    forward_backward,
    log_likelihood,
    simulate_batch,
    transition_matrix,
)
from .physics import (
    ResonatorParams,
    SensorParams,
    coulomb_fwhm,
    damped_rabi,
    delta_c_drt,
    ict_lineshape,
    lz_probability,
    min_integration_time,
    optimal_tunnel_rate,
    reflectometry_snr,
    resonator_from_vna,
    tunnel_rate_from_gate,
)
from .pipeline import (
    BundleManifest,
    IqBatch,
    TraceBundle,
    build_histogram,
    drift_correct,
    iq_project,
    noise_scaling,
    with_linear_drift,
)
from .readout import (
    ConfusionMatrix,
    MetricReport,
    ReadoutBasis,
    confusion_metrics,
    fidelity_sweep,
    hmm_classify,
    hmm_classify_batch,
    map_basis,
    optimal_threshold_empirical,
    threshold_classify,
    window_average,
)
