"""Spline-based square-normalizing flow for antisymmetric 1D wavefunctions,
trained by variational quantum Monte Carlo with exact sampling, plus an
independent finite-difference grid eigensolver used as the energy oracle."""

__version__ = "0.1.0"
