"""Desk-scale training lab for decoupled asymmetric fusion of tabular and
time-series modalities."""

__version__ = "0.1.0"
