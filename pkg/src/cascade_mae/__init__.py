"""Federated one-block masked-autoencoder pre-training, cascading and linear analysis in numpy."""

__version__ = "0.1.0"
