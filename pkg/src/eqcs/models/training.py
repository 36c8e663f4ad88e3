"""Negative-ELBO objective and a seeded Adam training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import diffmath as dm
from ..groups import rotate_bilinear
from .nets import VAEModel, _as_node, decoder_logits, encoder_outputs, graph_params
from .posterior import GaussianPosterior, kl_divergence, sample_latent

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eta: float = 1e-2
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("batch_size", "lr", "eta", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay constants must lie in [0, 1)")


@dataclass
class ElboTerms:
    loss: dm.Node  # mean negative ELBO over the batch
    reconstruction: dm.Node  # (N,) negative log-likelihood per item
    kl: dm.Node  # (N,)
    posterior: GaussianPosterior


def reconstruction_nll(model: VAEModel, logits: dm.Node, x: dm.Node) -> dm.Node:
    """Per-item negative log-likelihood of ``x`` under the decoder output."""
    n_ = x.shape[0]
    flat = int(np.prod(x.shape[1:]))
    if model.likelihood == "bernoulli":
        # -[x log p + (1-x) log(1-p)] with p = sigmoid(l)  ==  softplus(l) - x l
        per = dm.sub(dm.softplus(logits), dm.mul(x, logits))
        return dm.sum_(dm.reshape(per, (n_, flat)), axis=1)
    sq = dm.sum_(dm.reshape(dm.square(dm.sub(x, logits)), (n_, flat)), axis=1)
    return dm.add(dm.mul(sq, 0.5), 0.5 * flat * LOG_2PI)


def elbo_terms(model: VAEModel, x, noise, P=None, angle=None) -> ElboTerms:
    """Assemble the negative ELBO for a batch with explicit reparametrization noise."""
    xv = x.value if isinstance(x, dm.Node) else np.asarray(x, dtype=float)
    if model.likelihood == "bernoulli" and (xv.min() < 0 or xv.max() > 1):
        raise ValueError("Bernoulli likelihood needs inputs in [0, 1]")
    gr = x.graph if isinstance(x, dm.Node) else None
    if gr is None:
        gr = next((p.graph for p in (P or {}).values()), None) or dm.ValueGraph()
    P = P or graph_params(model, gr)
    x = _as_node(gr, x)
    mu, V = encoder_outputs(model, x, P)
    post = GaussianPosterior(mu, V, model.eta)
    z = sample_latent(post, noise)
    logits = decoder_logits(model, z, P, angle)
    rec = reconstruction_nll(model, logits, x)
    kl = kl_divergence(post)
    loss = dm.mean(dm.add(rec, kl))
    return ElboTerms(loss, rec, kl, post)


def negative_elbo(model: VAEModel, x, noise, angle=None) -> float:
    """Mean negative ELBO of a batch (numeric)."""
    x = np.asarray(x, dtype=float)
    return float(elbo_terms(model, x, np.asarray(noise, dtype=float), angle=angle).loss.value)


def elbo(model: VAEModel, x, noise, angle=None) -> float:
    """Mean ELBO (the lower bound itself, not the loss)."""
    return -negative_elbo(model, x, noise, angle)


class Adam:
    """Adaptive moment estimation over a dict of named arrays."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


@dataclass
class TrainResult:
    model: VAEModel
    loss_trace: list = field(default_factory=list)


def _prepare_batch(model: VAEModel, batch: np.ndarray, cfg: TrainConfig, rng):
    """Apply the variant-specific preprocessing; returns (targets, angles or None)."""
    if model.kind == "cond":
        angles = rng.uniform(0.0, 2.0 * math.pi, size=len(batch))
        return np.clip(rotate_bilinear(batch, angles), 0.0, 1.0), angles
    if cfg.augment or model.kind == "aug":
        angles = rng.uniform(0.0, 2.0 * math.pi, size=len(batch))
        return np.clip(rotate_bilinear(batch, angles), 0.0, 1.0), None
    return batch, None


def train(model: VAEModel, images, cfg: TrainConfig, log=None) -> TrainResult:
    """Minimize the mean negative ELBO with Adam; fully determined by ``cfg.seed``.

    Returns the trained model and the per-epoch mean loss.
    """
    images = np.asarray(images, dtype=float)
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ValueError("training images must be normalized to [0, 1]")
    model = replace(model, eta=cfg.eta)
    if cfg.epochs == 0 or len(images) == 0:
        return TrainResult(model, [])
    rng = np.random.default_rng(cfg.seed)
    params = {k: np.array(v) for k, v in model.params.items()}
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    trace = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch, angles = _prepare_batch(model, images[order[start:start + cfg.batch_size]], cfg, rng)
            noise = rng.standard_normal((len(batch), model.latent_dim))
            current = model.with_params(params)
            gr = dm.ValueGraph()
            P = graph_params(current, gr, trainable=True)
            try:
                terms = elbo_terms(current, gr.constant(batch), noise, P, angles)
                grads = gr.backward(terms.loss)
            except (dm.NonFiniteError, dm.NotPositiveDefiniteError) as exc:
                raise TrainingDivergence(
                    f"training diverged at epoch {epoch}, batch starting {start}: {exc}") from exc
            params = opt.step(params, {k: grads[P[k]] for k in params})
            total += float(terms.loss.value) * len(batch)
        trace.append(total / n)
        if not math.isfinite(trace[-1]):
            raise TrainingDivergence(f"loss became non-finite at epoch {epoch}")
        if log is not None:
            log(epoch, trace[-1])
    return TrainResult(model.with_params(params, epochs=cfg.epochs, final_loss=trace[-1],
                                         seed=cfg.seed), trace)
