"""Model risk in American put exercise: Heston benchmark against Black-Scholes and Dupire rules."""

__version__ = "0.1.0"
