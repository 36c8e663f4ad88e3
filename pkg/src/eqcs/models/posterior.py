"""Full-rank Gaussian posteriors: Sigma = V V^T + eta I, factored by Cholesky."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffmath as dm


def _eye_like(graph: dm.ValueGraph, batch: int, k: int) -> dm.Node:
    key = ("eye", batch, k)
    if key not in graph.cache:
        graph.cache[key] = graph.constant(np.broadcast_to(np.eye(k), (batch, k, k)))
    return graph.cache[key]


@dataclass
class GaussianPosterior:
    """Batch of posteriors. ``mean`` is (N, k), ``factor`` is (N, k, c_v).

    Fields are graph nodes when built inside a differentiable computation and
    plain arrays otherwise; ``sigma`` and ``chol`` follow the same type.
    """

    mean: object
    factor: object
    eta: float
    sigma: object = None
    chol: object = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("jitter eta must be positive")
        if self.sigma is None:
            self.sigma, self.chol = _factorize(self.factor, self.eta)

    @property
    def latent_dim(self) -> int:
        return self.mean.shape[-1]

    def numeric(self) -> "GaussianPosterior":
        """Detach from the graph: the same posterior with array fields."""
        if not isinstance(self.mean, dm.Node):
            return self
        return GaussianPosterior(self.mean.value, self.factor.value, self.eta,
                                 self.sigma.value, self.chol.value)


def _factorize(V, eta: float):
    if isinstance(V, dm.Node):
        n, k, _ = V.shape
        s = dm.matmul(V, dm.transpose(V, (0, 2, 1)))
        s = dm.add(s, dm.mul(_eye_like(V.graph, n, k), eta))
        return s, dm.cholesky(s)
    V = np.asarray(V, dtype=float)
    s = V @ np.swapaxes(V, -1, -2) + eta * np.eye(V.shape[-1])
    try:
        L = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise dm.NotPositiveDefiniteError("posterior covariance is not positive definite") from None
    return s, L


def posterior_from_moments(mean, sigma) -> GaussianPosterior:
    """Wrap explicit (N, k) means and (N, k, k) covariances (arrays only)."""
    mean = np.atleast_2d(np.asarray(mean, dtype=float))
    sigma = np.asarray(sigma, dtype=float).reshape(mean.shape[0], mean.shape[1], mean.shape[1])
    L = np.linalg.cholesky(sigma)
    return GaussianPosterior(mean, L, 1e-300, sigma, L)


def sample_latent(post: GaussianPosterior, noise):
    """Reparametrized draw ``z = mu + L eps``; ``noise`` has the shape of ``mean``."""
    if isinstance(post.mean, dm.Node):
        n, k = post.mean.shape
        eps = noise if isinstance(noise, dm.Node) else post.mean.graph.constant(noise)
        if eps.shape != (n, k):
            raise dm.ShapeError(f"noise shape {eps.shape} does not match the mean {(n, k)}")
        shift = dm.reshape(dm.matmul(post.chol, dm.reshape(eps, (n, k, 1))), (n, k))
        return dm.add(post.mean, shift)
    eps = np.asarray(noise, dtype=float)
    if eps.shape != post.mean.shape:
        raise dm.ShapeError(f"noise shape {eps.shape} does not match the mean {post.mean.shape}")
    return post.mean + np.einsum("nij,nj->ni", post.chol, eps)


def kl_divergence(post: GaussianPosterior):
    """Per-item KL(q || N(0, I)) = 1/2 (-log det Sigma - k + tr Sigma + mu^T mu).

    The trace is taken as ``||L||_F^2`` so that non-diagonal factors are
    handled correctly.  Returns an (N,) node or array.
    """
    L, mu = post.chol, post.mean
    k = post.latent_dim
    if isinstance(mu, dm.Node):
        logdet = dm.mul(dm.sum_(dm.log(dm.diagonal(L)), axis=1), 2.0)
        frob = dm.sum_(dm.reshape(dm.square(L), (L.shape[0], k * k)), axis=1)
        mm = dm.sum_(dm.square(mu), axis=1)
        return dm.mul(dm.add(dm.sub(dm.add(frob, mm), logdet), -float(k)), 0.5)
    L, mu = np.asarray(L), np.asarray(mu)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return 0.5 * (np.sum(L**2, axis=(-2, -1)) + np.sum(mu**2, axis=-1) - logdet - k)
