"""Proximal Galerkin solvers for non-symmetric variational inequalities."""

__version__ = "0.1.0"
