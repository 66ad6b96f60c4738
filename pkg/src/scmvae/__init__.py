"""scmvae: structured-latent VAE with a linear SCM layer, learned concept-correlation
masks, monotone concept heads, and root-factor controllable generation."""

__version__ = "0.1.0"
