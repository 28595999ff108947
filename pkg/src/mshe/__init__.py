"""Pseudo-spectral Galerkin simulation of the stochastic modified Swift-Hohenberg equation on the 2-torus."""

__version__ = "0.1.0"
