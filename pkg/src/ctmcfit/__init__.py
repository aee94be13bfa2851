"""Nonparametric covariate-dependent transition rates for finite-state
continuous-time Markov chains.

The log-rate of every permitted transition is a function of a covariate
vector, represented either by known polynomials or by a kernel expansion
over the observed covariates.  Expansion weights are fitted by
ridge-penalized quasi-Newton optimization or by EMVS posterior-mode
search under a spike-and-slab prior; a Gillespie simulator and recovery
metrics close the loop.
"""

from .chain import (
    Arm,
    CensoringModel,
    ChainTopology,
    Dataset,
    ExponentialCensoring,
    FixedHorizonCensoring,
    Trajectory,
    UniformCensoring,
    UniformCovariates,
    read_dataset_csv,
    sample_next_jump,
    simulate_dataset,
    simulate_trajectory,
    topology_from_dict,
    write_dataset_csv,
)
from .fit_emvs import (
    EmvsConfig,
    EmvsResult,
    EmvsState,
    MixtureInit,
    e_step,
    fit_emvs,
    init_from_mixture,
    m_step_inclusion,
    m_step_weights,
)
from .fit_freq import FitResult, FreqConfig, fit_frequentist
from .kernel import (
    GramSet,
    KernelRateFunction,
    KernelSpec,
    LinearKernel,
    PolynomialKernel,
    PolynomialRateFunction,
    RateFunction,
    RbfKernel,
    Standardizer,
    gram_matrices,
    load_rate_function,
    rate_function_from_dict,
    save_rate_function,
)
from .likelihood import (
    LOG_RATE_BOUND,
    LossValue,
    negative_log_likelihood,
    negative_log_likelihood_grad,
    penalized_loss,
    quad_penalized_loss,
)
from .metrics import (
    AbsorptionReport,
    MseReport,
    absorption_distance,
    export_curve,
    log_rate_mse,
)
from .study import ScenarioSpec, StudyReport, preset_topology, run_scenario, truth_rate_function

__version__ = "0.1.0"
