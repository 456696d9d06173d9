"""Sequential Bayesian filtering of loop-detector speeds with a three-regime switching DLM."""

__version__ = "0.1.0"
