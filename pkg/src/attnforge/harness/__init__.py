"""Synthetic data, configuration, training runs and the command-line interface."""
from .runner import RunReport, compare, pe_metric, sweep_intrinsic, train

__all__ = ["RunReport", "compare", "pe_metric", "sweep_intrinsic", "train"]
