"""Tangent Levy market models for implied-volatility surfaces.

Calibration of double-exponential and discrete tangent Levy models to call
quote panels, PCA factor dynamics with no-arbitrage drift restrictions,
Monte Carlo simulation of arbitrage-free surfaces, a SABR baseline, and a
minimum-variance option-portfolio backtest.
"""

__version__ = "0.1.0"
