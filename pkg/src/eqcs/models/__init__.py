"""Variational autoencoders used as generative priors."""
from .nets import (
    KINDS, ModelError, VAEModel, build_model, conditional_decode, decode, decoder_logits,
    encode, encoder_outputs, graph_params, latent_transform,
)
from .posterior import GaussianPosterior, kl_divergence, posterior_from_moments, sample_latent
from .training import (
    Adam, TrainConfig, TrainResult, TrainingDivergence, elbo, elbo_terms, negative_elbo,
    reconstruction_nll, train,
)

__all__ = [
    "KINDS", "ModelError", "VAEModel", "build_model", "conditional_decode", "decode",
    "decoder_logits", "encode", "encoder_outputs", "graph_params", "latent_transform",
    "GaussianPosterior", "kl_divergence", "posterior_from_moments", "sample_latent",
    "Adam", "TrainConfig", "TrainResult", "TrainingDivergence", "elbo", "elbo_terms",
    "negative_elbo", "reconstruction_nll", "train",
]
