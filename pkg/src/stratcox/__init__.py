"""Stratified proportional hazards regression with partially missing strata."""

__version__ = "0.1.0"
