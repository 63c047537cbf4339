"""Composable attribute control for sequence models in a VAE latent space."""

__version__ = "0.1.0"
