"""Flexibly-tied Gaussian mixture models fit by stochastic first-order methods.

The shared precision factor is either unconstrained, PLU-factored, or kept on
the special orthogonal group and moved by Riemannian steps with adaptive
coordinate-wise clipping.
"""
from .data import SyntheticSpec, TrueModel, sample, synth_dataset, synth_model, whiten
from .fit import METHODS, FitError, FitResult, RunConfig, fit, prepare, run_pipeline
from .metrics import FitReport, avg_nll, cov_err, match_components, mean_err
from .model import GmmParams, PriorConfig, grad, init_params, nll, objective

__version__ = "0.1.0"
