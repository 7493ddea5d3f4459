"""Motion-deblurring Gaussian splatting with continuous camera trajectories."""

__version__ = "0.1.0"
