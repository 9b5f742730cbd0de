"""Two-stage transient-robust reconstruction on a 2.5D Gaussian splatting backbone."""

__version__ = "0.1.0"
