"""Optimal liquidation with dark pools, a stochastic liquidity signal and a singular terminal constraint."""

__version__ = "0.1.0"
