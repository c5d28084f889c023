"""Desk-scale 4D video field GAN: autodiff, fields, volume rendering, discriminators, training."""

__version__ = "0.1.0"
