"""Synthetic ISM-band protocol datasets and SDAE-pretrained compact classifiers."""

__version__ = "0.1.0"
