"""Unified demosaicing network for Bayer and non-Bayer CFAs, trained with
knowledge learning, per-CFA adaptive kernels and test-time adaptation."""

__version__ = "0.1.0"
