"""Federated GAN toolkit for binary tabular patient records."""

__version__ = "0.1.0"
