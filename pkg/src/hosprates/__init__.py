"""Hierarchical Bayesian estimation, standardization and calibration of
grouped binary-outcome rates (hospital mortality reporting)."""

__version__ = "0.1.0"
