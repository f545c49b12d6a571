"""
logacq
======
Log-space improvement acquisitions for Bayesian optimization: numerically
stable special functions, a Matérn-5/2 GP surrogate, analytic, Monte-Carlo
and hypervolume acquisitions, a multi-start optimizer and a benchmark harness.
"""

from .acq_analytic import AcqResult, AnalyticAcquisition, IncumbentState, log_h, logcei, logei, logpi
from .acq_mc import CandidateBatch, MCAcquisition, Temperatures, qlogcei, qlogei, qlognei
from .acq_mohv import BoxDecomposition, EHVIAcquisition, ParetoFrontier, box_decompose, hypervolume, pareto_filter, qlogehvi
from .acq_opt import OptimConfig, OptimReport, optimize_acq
from .errors import ConfigError, DomainError, FitError, LogAcqError, OptimizationError
from .surrogate import DataSet, GPHyperparams, GPModel, ModelList, PosteriorGaussian

__version__ = "0.1.0"
