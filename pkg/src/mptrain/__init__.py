"""Training and evaluation toolkit for autoregressive surrogates of chaotic
systems, built around multi-step penalty optimization."""

__version__ = "0.1.0"
