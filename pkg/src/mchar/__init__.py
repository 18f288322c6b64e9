"""Toy identity- and motion-conditioned latent video diffusion with its flow and dataset pipelines."""

__version__ = "0.1.0"
