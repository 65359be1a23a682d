"""Diffusion inference service: noise prediction, attention capture, VAE
encode/decode, and perceptual distance behind a JSON/HTTP wire protocol."""

__version__ = "0.1.0"
