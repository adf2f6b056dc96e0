"""Spectral-norm and Hessian-based generalization bounds for message-passing GNNs."""

__version__ = "0.1.0"
