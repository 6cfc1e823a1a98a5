"""Regime-aware probabilistic multi-horizon forecasting.

A deterministic stick-breaking gate allocates forecast locations to regimes,
a gate-weighted mixture of per-regime kernels drives a sparse variational GP
residual, and a Student-t regime mixture supplies heavy-tailed predictive
densities evaluated by Gauss-Hermite quadrature.
"""

__version__ = "0.1.0"
