"""Recursive feature machine probes and activation steering on a toy autoregressive model."""

__version__ = "0.1.0"
