"""VAE architectures: equivariant, convolutional, MLP, conditional and linear.

All convolutional variants share one layout (16x16 in, three stages down to a
1x1 latent field and back); the plain convolutional baselines are the same
network over the trivial group C1 with wider channels.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import diffmath as dm
from ..gconv import field_bias, gconv_layer, gconv_transpose, group_pool, lift_conv
from ..groups import CyclicGroup, latent_action
from .posterior import GaussianPosterior

KINDS = ("eq", "conv", "aug", "cond", "mlp", "linear")
LIKELIHOODS = ("bernoulli", "gaussian")


class ModelError(ValueError):
    pass


@dataclass
class VAEModel:
    """Parameters plus the architecture descriptor needed to rebuild the forward map."""

    kind: str
    group_order: int
    latent_dim: int
    image_size: int
    channels: tuple
    likelihood: str = "bernoulli"
    covariance: str = "full"
    eta: float = 1e-2
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def group(self) -> CyclicGroup:
        return CyclicGroup(self.group_order)

    @property
    def latent_channels(self) -> int:
        return self.latent_dim // self.group_order

    @property
    def is_conditional(self) -> bool:
        return self.kind == "cond"

    @property
    def is_equivariant(self) -> bool:
        return self.kind == "eq"

    def descriptor(self) -> dict:
        return {
            "kind": self.kind, "group_order": self.group_order, "latent_dim": self.latent_dim,
            "image_size": self.image_size, "channels": list(self.channels),
            "likelihood": self.likelihood, "covariance": self.covariance, "eta": self.eta,
        }

    def with_params(self, params: dict, **meta) -> "VAEModel":
        frozen = {}
        for name, value in params.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            frozen[name] = arr
        return replace(self, params=frozen, meta={**self.meta, **meta})

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.descriptor(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# construction

def _normal(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)


def _conv_shapes(model: VAEModel) -> dict:
    n, s = model.group_order, model.image_size
    c1, c2, c3 = model.channels
    c_lat = model.latent_channels
    head = s // 4
    cond = 2 if model.kind == "cond" else 0
    out_head = c_lat if model.covariance == "diagonal" else c_lat * (1 + model.latent_dim)
    shapes = {
        "enc0.w": (c1, 1, 3, 3), "enc0.b": (c1,),
        "enc1.w": (c2, c1, n, 4, 4), "enc1.b": (c2,),
        "enc2.w": (c3, c2, n, 4, 4), "enc2.b": (c3,),
        "head.w": (out_head, c3, n, head, head), "head.b": (out_head,),
        "dec0.w": (c_lat + cond, c3, n, head, head), "dec0.b": (c3,),
        "dec1.w": (c3, c2, n, 4, 4), "dec1.b": (c2,),
        "dec2.w": (c2, c1, n, 4, 4), "dec2.b": (c1,),
        "dec3.w": (1, c1, n, 3, 3), "dec3.b": (1,),
    }
    if model.covariance == "diagonal":
        shapes["logvar.w"] = (c3 * n * head * head, model.latent_dim)
        shapes["logvar.b"] = (model.latent_dim,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.startswith("dec") and name != "dec3.w":
        # transposed layers: every output sees in_channels * |G| * k^2 / stride^2 terms
        return int(np.prod(shape)) // shape[1]
    if name == "logvar.w":
        return shape[0]
    return int(np.prod(shape[1:]))


def build_model(kind: str, *, group_order: int = 4, latent_dim: int = 16, image_size: int = 16,
                channels=(8, 8, 8), hidden: int = 128, likelihood: str = "bernoulli",
                covariance: str = "full", eta: float = 1e-2, seed: int = 0) -> VAEModel:
    """Initialize a model of the given kind with seeded random weights."""
    if kind not in KINDS:
        raise ModelError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    if likelihood not in LIKELIHOODS:
        raise ModelError(f"unknown likelihood {likelihood!r}")
    if covariance not in ("full", "diagonal"):
        raise ModelError(f"unknown covariance form {covariance!r}")
    if eta <= 0:
        raise ModelError("eta must be positive")
    if kind != "eq":
        group_order = 1
    if latent_dim % group_order:
        raise ModelError(f"latent dim {latent_dim} is not divisible by |G|={group_order}")
    rng = np.random.default_rng(seed)
    params = {}
    if kind in ("mlp", "linear"):
        npix = image_size * image_size if kind == "mlp" else image_size
        model = VAEModel(kind, 1, latent_dim, image_size, (hidden,), likelihood, covariance, eta)
        k = latent_dim
        if kind == "mlp":
            params["enc.w"] = _normal(rng, (npix, hidden), npix)
            params["enc.b"] = np.zeros(hidden)
            params["mu.w"] = _normal(rng, (hidden, k), hidden, 1.0)
            params["mu.b"] = np.zeros(k)
            params["v.w"] = _normal(rng, (hidden, k * k), hidden, 1.0)
            params["v.b"] = np.zeros(k * k)
            params["dec.w"] = _normal(rng, (k, hidden), k)
            params["dec.b"] = np.zeros(hidden)
            params["out.w"] = _normal(rng, (hidden, npix), hidden, 1.0)
            params["out.b"] = np.zeros(npix)
        else:
            params["enc.w"] = _normal(rng, (npix, k), npix, 1.0)
            params["enc.b"] = np.zeros(k)
            params["v"] = 0.5 * np.eye(k)
            params["dec.w"] = _normal(rng, (k, npix), k, 1.0)
            params["dec.b"] = np.zeros(npix)
        return model.with_params(params)
    if image_size % 4 or image_size < 8:
        raise ModelError("convolutional models need an image size divisible by 4 (>= 8)")
    model = VAEModel(kind, group_order, latent_dim, image_size, tuple(channels), likelihood,
                     covariance, eta)
    for name, shape in _conv_shapes(model).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            gain = 1.0 if name in ("head.w", "logvar.w", "dec3.w") else 2.0
            params[name] = _normal(rng, shape, _fan_in(name, shape), gain)
    return model.with_params(params)


# --------------------------------------------------------------------------
# graph plumbing

def graph_params(model: VAEModel, graph: dm.ValueGraph, trainable: bool = False) -> dict:
    """Lift the parameters into ``graph`` (once per graph and model)."""
    key = ("params", id(model), trainable)
    if key not in graph.cache:
        make = graph.leaf if trainable else graph.constant
        graph.cache[key] = {name: make(v, name) for name, v in model.params.items()}
    return graph.cache[key]


def _as_node(graph: dm.ValueGraph, x) -> dm.Node:
    return x if isinstance(x, dm.Node) else graph.constant(x)


def _dense(x: dm.Node, w: dm.Node, b: dm.Node) -> dm.Node:
    y = dm.matmul(x, w)
    return dm.add(y, dm.expand(dm.reshape(b, (1, b.shape[0])), y.shape))


def _act(field: dm.Node, bias: dm.Node) -> dm.Node:
    return dm.relu(field_bias(field, bias))


def _batch_images(model: VAEModel, x):
    """Accept (h, w) or (N, h, w); return (N, h, w) plus a flag for squeezing."""
    shape = x.shape
    s = model.image_size
    single = len(shape) == (1 if model.kind == "linear" else 2)
    if model.kind == "linear":
        ok = shape[-1] == s and len(shape) in (1, 2)
    else:
        ok = tuple(shape[-2:]) == (s, s) and len(shape) in (2, 3)
    if not ok:
        raise dm.ShapeError(f"input shape {shape} does not match the model (size {s})")
    if single:
        x = dm.reshape(x, (1, *shape)) if isinstance(x, dm.Node) else np.asarray(x)[None]
    return x, single


# --------------------------------------------------------------------------
# forward maps

def _encoder_conv(model, P, x):
    g = model.group
    n_ = x.shape[0]
    s = model.image_size
    h = _act(lift_conv(dm.reshape(x, (n_, 1, s, s)), P["enc0.w"], g, 1, 1), P["enc0.b"])
    h = _act(gconv_layer(h, P["enc1.w"], g, 2, 1), P["enc1.b"])
    h = _act(gconv_layer(h, P["enc2.w"], g, 2, 1), P["enc2.b"])
    head = field_bias(gconv_layer(h, P["head.w"], g, 1, 0), P["head.b"])  # (N, c, n, 1, 1)
    c_lat, k, n = model.latent_channels, model.latent_dim, model.group_order
    mu = dm.reshape(head[:, :c_lat], (n_, k))
    if model.covariance == "diagonal":
        # log-variance from a dense head over the flattened field: not equivariant
        flat = dm.reshape(h, (n_, int(np.prod(h.shape[1:]))))
        return mu, _diag_factor(_dense(flat, P["logvar.w"], P["logvar.b"]))
    v = dm.reshape(head[:, c_lat:], (n_, k, k))  # (N, column, latent coordinate)
    return mu, dm.mul(dm.transpose(v, (0, 2, 1)), 1.0 / math.sqrt(k))


def _diag_factor(logvar: dm.Node) -> dm.Node:
    n_, k = logvar.shape
    sd = dm.exp(dm.mul(logvar, 0.5))
    eye = np.broadcast_to(np.eye(k), (n_, k, k))
    return dm.mul(dm.expand(dm.reshape(sd, (n_, k, 1)), (n_, k, k)), eye)


def _decoder_conv(model, P, z, cond=None):
    g = model.group
    n_ = z.shape[0]
    c_lat, n = model.latent_channels, model.group_order
    f = dm.reshape(z, (n_, c_lat, n, 1, 1))
    if cond is not None:
        f = dm.concat([f, dm.reshape(cond, (n_, 2, 1, 1, 1))], axis=1)
    h = _act(gconv_transpose(f, P["dec0.w"], g, 1, 0), P["dec0.b"])
    h = _act(gconv_transpose(h, P["dec1.w"], g, 2, 1), P["dec1.b"])
    h = _act(gconv_transpose(h, P["dec2.w"], g, 2, 1), P["dec2.b"])
    out = field_bias(gconv_layer(h, P["dec3.w"], g, 1, 1), P["dec3.b"])
    s = model.image_size
    return dm.reshape(group_pool(out), (n_, s, s))


def _encoder_mlp(model, P, x):
    n_ = x.shape[0]
    k = model.latent_dim
    h = dm.relu(_dense(dm.reshape(x, (n_, model.image_size**2)), P["enc.w"], P["enc.b"]))
    mu = _dense(h, P["mu.w"], P["mu.b"])
    v = dm.reshape(_dense(h, P["v.w"], P["v.b"]), (n_, k, k))
    return mu, dm.mul(v, 1.0 / math.sqrt(k))


def _decoder_mlp(model, P, z):
    s = model.image_size
    h = dm.relu(_dense(z, P["dec.w"], P["dec.b"]))
    return dm.reshape(_dense(h, P["out.w"], P["out.b"]), (z.shape[0], s, s))


def _encoder_linear(model, P, x):
    n_, k = x.shape[0], model.latent_dim
    mu = _dense(x, P["enc.w"], P["enc.b"])
    return mu, dm.expand(dm.reshape(P["v"], (1, k, k)), (n_, k, k))


def _decoder_linear(model, P, z):
    return _dense(z, P["dec.w"], P["dec.b"])


def encoder_outputs(model: VAEModel, x, P=None):
    """Graph-level encoder: returns (mu, V) nodes for a batch ``x``."""
    gr = x.graph if isinstance(x, dm.Node) else dm.ValueGraph()
    P = P or graph_params(model, gr)
    x = _as_node(gr, x)
    if model.kind == "mlp":
        return _encoder_mlp(model, P, x)
    if model.kind == "linear":
        return _encoder_linear(model, P, x)
    return _encoder_conv(model, P, x)


def decoder_logits(model: VAEModel, z, P=None, angle=None):
    """Graph-level decoder pre-activation: (N, h, w) logits (or Gaussian means)."""
    graph_of = [a for a in (z, angle) if isinstance(a, dm.Node)]
    gr = graph_of[0].graph if graph_of else dm.ValueGraph()
    P = P or graph_params(model, gr)
    z = _as_node(gr, z)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise dm.ShapeError(f"latent batch shape {z.shape} does not match k={model.latent_dim}")
    if model.kind == "mlp":
        return _decoder_mlp(model, P, z)
    if model.kind == "linear":
        return _decoder_linear(model, P, z)
    cond = None
    if model.kind == "cond":
        if angle is None:
            angle = np.zeros(z.shape[0])
        a = _as_node(gr, angle)
        if a.size == 1 and z.shape[0] != 1:
            a = dm.expand(dm.reshape(a, (1,)), (z.shape[0],))
        a = dm.reshape(a, (z.shape[0], 1))
        cond = dm.concat([dm.cos(a), dm.sin(a)], axis=1)
    return _decoder_conv(model, P, z, cond)


def _mean_from_logits(model: VAEModel, logits):
    if model.likelihood == "bernoulli":
        return dm.sigmoid(logits)
    return logits


# --------------------------------------------------------------------------
# public API

def encode(model: VAEModel, x, P=None) -> GaussianPosterior:
    """Posterior q(z | x) for one image (h, w) or a batch (N, h, w)."""
    x, single = _batch_images(model, x)
    numeric = not isinstance(x, dm.Node)
    mu, V = encoder_outputs(model, x, P)
    post = GaussianPosterior(mu, V, model.eta)
    if numeric:
        post = post.numeric()
        if single:
            post = GaussianPosterior(post.mean[0], post.factor[0], post.eta, post.sigma[0],
                                     post.chol[0])
    return post


def decode(model: VAEModel, z, P=None):
    """Likelihood parameters: Bernoulli probabilities or the Gaussian mean image.

    ``z`` is (k,) or (N, k); arrays in, arrays out; nodes in, nodes out.
    """
    if model.is_conditional:
        return conditional_decode(model, z, 0.0, P)
    return _decode(model, z, None, P)


def conditional_decode(model: VAEModel, z, angle, P=None):
    """Decoder of the angle-conditioned model, fed (cos angle, sin angle) with z."""
    if not model.is_conditional:
        raise ModelError(f"conditional_decode needs a conditional model, got kind {model.kind!r}")
    return _decode(model, z, angle, P)


def _decode(model, z, angle, P):
    single = len(z.shape) == 1
    numeric = not isinstance(z, dm.Node) and not isinstance(angle, dm.Node)
    if single:
        z = dm.reshape(z, (1, z.shape[0])) if isinstance(z, dm.Node) else np.asarray(z)[None]
        if isinstance(angle, dm.Node):
            angle = dm.reshape(angle, (1,))
    out = _mean_from_logits(model, decoder_logits(model, z, P, angle))
    if numeric:
        out = out.value
        return out[0] if single else out
    return dm.reshape(out, out.shape[1:]) if single else out


def latent_transform(model: VAEModel, g, z):
    """The latent action T_g^z (regular blocks) for equivariant models."""
    return latent_action(model.group, g, z)


__all__ = [
    "KINDS", "ModelError", "VAEModel", "build_model", "encode", "decode", "conditional_decode",
    "encoder_outputs", "decoder_logits", "graph_params", "latent_transform",
]
