"""Marginal promotion time cure models for clustered survival data.

Estimators: independence (NPM), weighted GEE and quadratic inference
functions, each alternating with a nonparametric baseline CDF.
"""
from .baseline import StepCdf, estimate_baseline, risk_weight, solve_lambda
from .data import (ClusteredDataset, Cluster, DataFormatError, Family, LinkOverflowError,
                   Observation, cure_probability, design_row, mu, read_csv, validate, write_csv)
from .fit import BootstrapConfig, FitConfig, FitResult, Method, bootstrap, fit
from .gee import WorkingCorrelation
from .simulate import SimConfig, calibrate_nu, simulate
from .study import StudyDesign, kaplan_meier, run_study

__version__ = "0.1.0"
