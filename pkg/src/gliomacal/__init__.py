"""Bayesian calibration of a glioma growth model against MRI and FET-PET, with RT target planning."""

__version__ = "0.1.0"
