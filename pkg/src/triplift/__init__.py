"""Latent-conditioned tri-plane radiance fields lifted from posed 2D views, and
their composition into street scenes as labelled training data."""

__version__ = "0.1.0"
