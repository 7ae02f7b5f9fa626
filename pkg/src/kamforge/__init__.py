"""Finite-truncation normal-form toolkit for lattice Hamiltonian systems."""

__version__ = "0.1.0"
