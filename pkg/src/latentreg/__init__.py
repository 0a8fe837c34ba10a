"""Multiview rigid registration by optimisation in a point-cloud autoencoder's latent space."""

__version__ = "0.1.0"
