"""Lattice statics for straight dislocations in multilattice crystals."""

__version__ = "0.1.0"
