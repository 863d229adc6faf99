"""BFS extraction from distributed Brillouin gain spectra: curve fitting and a residual CNN."""

__version__ = "0.1.0"
