"""Small-noise semilinear SPDEs on [0, 1]: simulation, rate functionals and rare events."""

__version__ = "0.1.0"
