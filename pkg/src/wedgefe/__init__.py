"""Model-robust fixed-effects estimation for longitudinal cluster trials."""
__version__ = "0.1.0"
