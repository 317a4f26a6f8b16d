"""Self-supervised masked-autoencoder toolkit for 1D spectra."""

__version__ = "0.1.0"
