"""Stochastic three-box energy-balance models: Kalman-filter fitting,
hierarchical ensemble inference and calibrated temperature projections."""

__version__ = "0.1.0"
