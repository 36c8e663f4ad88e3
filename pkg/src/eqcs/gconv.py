"""Group convolutions over cyclic rotation groups.

Feature fields are laid out ``(N, C, |G|, H, W)``.  Every layer is realized as
an ordinary 2-D cross-correlation whose filter bank is a fixed linear
expansion of the free kernel weights (rotate spatially by each g_i, shift the
group axis by i).  For C1/C2/C4 the expansion is a permutation, so the layers
are exactly equivariant; larger groups render the rotated kernels from a
smooth parametrization and are equivariant only approximately.
"""
from __future__ import annotations

import functools
from typing import Callable, Iterable

import numpy as np

from . import diffmath as dm
from .groups import (
    CyclicGroup,
    GroupElement,
    angle_of,
    field_action,
    image_action,
    regular_rep,
    shift_index,
)


class GConvError(ValueError):
    pass


# --------------------------------------------------------------------------
# vector group convolution  (w * x)(g) = <T_g w, x>

def group_conv_vec(w, x, group: CyclicGroup) -> np.ndarray:
    w, x = np.asarray(w, dtype=float), np.asarray(x, dtype=float)
    n = group.order
    if w.shape != (n,) or x.shape != (n,):
        raise GConvError(f"group_conv_vec needs two vectors of length {n}")
    return np.array([w[shift_index(n, i)] @ x for i in range(n)])


def build_circulant(w, group: CyclicGroup) -> np.ndarray:
    """Matrix with ``W[i, j] = w(g_i^-1 g_j)``, so that ``W @ x == group_conv_vec(w, x)``."""
    w = np.asarray(w, dtype=float)
    n = group.order
    if w.shape != (n,):
        raise GConvError(f"kernel must have length {n}")
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return w[(j - i) % n]


# --------------------------------------------------------------------------
# kernel expansion

KERNEL_SIGMA = 0.7
WINDOW_WIDTH = 0.8


def exact_group(group: CyclicGroup) -> bool:
    """True when every element acts on the pixel grid by an exact permutation."""
    return 4 % group.order == 0


def kernel_window(k: int) -> np.ndarray:
    """Radial Gaussian taper over the k x k grid, flattened.

    Being a function of the radius only, it commutes with rotation, and it
    keeps rotated kernels from leaking mass past the corners of the grid.
    """
    c = (k - 1) / 2.0
    a, b = np.meshgrid(np.arange(k) - c, np.arange(k) - c, indexing="ij")
    r = np.hypot(a, b).reshape(-1)
    return np.exp(-((r / (WINDOW_WIDTH * (c + 0.5))) ** 2))


def spatial_rotation_matrix(g: GroupElement, k: int) -> np.ndarray:
    """(k*k x k*k) linear map from free kernel weights to the kernel rotated by g.

    Groups of order 1, 2 and 4 use the exact index permutation.  Larger groups
    treat each free weight as the amplitude of a Gaussian bump centred on its
    pixel, rotate the continuous kernel, taper it radially and sample it on the
    grid; direct interpolation of single-pixel kernel weights is far too lossy
    at 3x3.
    """
    if 4 % g.order == 0:
        q = (4 * g.index) // g.order
        idx = np.rot90(np.arange(k * k).reshape(k, k), q).reshape(-1)
        return np.eye(k * k)[idx]
    c = (k - 1) / 2.0
    a, b = np.meshgrid(np.arange(k) - c, np.arange(k) - c, indexing="ij")
    p = np.stack([a.reshape(-1), b.reshape(-1)], axis=1)
    th = angle_of(g)
    cs, sn = np.cos(th), np.sin(th)
    src = np.stack([cs * p[:, 0] + sn * p[:, 1], -sn * p[:, 0] + cs * p[:, 1]], axis=1)
    d2 = ((src[:, None, :] - p[None, :, :]) ** 2).sum(-1)
    return kernel_window(k)[:, None] * np.exp(-d2 / (2 * KERNEL_SIGMA**2))


@functools.lru_cache(maxsize=None)
def _lift_expansion(n: int, k: int) -> np.ndarray:
    group = CyclicGroup(n)
    E = np.concatenate([spatial_rotation_matrix(g, k) for g in group])  # (n k^2, k^2)
    E.setflags(write=False)
    return E


@functools.lru_cache(maxsize=None)
def _group_expansion(n: int, k: int) -> np.ndarray:
    group = CyclicGroup(n)
    kk = k * k
    E = np.zeros((n, n, kk, n, kk))
    for i, g in enumerate(group):
        R = spatial_rotation_matrix(g, k)
        for j in range(n):
            E[i, j, :, (j - i) % n, :] = R
    E = E.reshape(n * n * kk, n * kk)
    E.setflags(write=False)
    return E


def expand_lift_kernels(kernels: dm.Node, group: CyclicGroup) -> dm.Node:
    """(O, C, k, k) base kernels -> (O*|G|, C, k, k) rotated filter bank."""
    o, c, k, k2 = kernels.shape
    if k != k2:
        raise GConvError("kernels must be square")
    n = group.order
    E = _lift_expansion(n, k)
    flat = dm.reshape(kernels, (o * c, k * k))
    bank = dm.matmul(flat, E.T)  # (o c, n k k)
    bank = dm.reshape(bank, (o, c, n, k, k))
    bank = dm.transpose(bank, (0, 2, 1, 3, 4))
    return dm.reshape(bank, (o * n, c, k, k))


def expand_group_kernels(kernels: dm.Node, group: CyclicGroup) -> dm.Node:
    """(O, C, |G|, k, k) kernels on the group -> (O*|G|, C*|G|, k, k) filter bank."""
    o, c, n, k, k2 = kernels.shape
    if n != group.order or k != k2:
        raise GConvError(f"kernel shape {kernels.shape} does not match C{group.order}")
    E = _group_expansion(n, k)
    flat = dm.reshape(kernels, (o * c, n * k * k))
    bank = dm.matmul(flat, E.T)  # (o c, n_out n_in k k)
    bank = dm.reshape(bank, (o, c, n, n, k, k))
    bank = dm.transpose(bank, (0, 2, 1, 3, 4, 5))
    return dm.reshape(bank, (o * n, c * n, k, k))


# --------------------------------------------------------------------------
# layers

def _graph_inputs(*arrays):
    """Lift plain arrays into a throwaway graph; report whether we did."""
    if any(isinstance(a, dm.Node) for a in arrays):
        gr = dm._graph_of(*arrays)
        return [dm._lift(gr, a) for a in arrays], False
    gr = dm.ValueGraph()
    return [gr.constant(a) for a in arrays], True


def _check_geometry(size: int, k: int, stride: int, padding: int) -> None:
    if stride not in (1, 2):
        raise GConvError("only stride 1 and 2 are supported")
    if k > size + 2 * padding:
        raise GConvError(f"kernel size {k} larger than padded input {size + 2 * padding}")
    if stride == 2 and (size + 2 * padding - k) % 2:
        raise GConvError(
            "stride-2 geometry must not truncate (size + 2*padding - kernel must be even), "
            "otherwise rotation does not commute with downsampling")


def lift_conv(image, kernels, group: CyclicGroup, stride: int = 1, padding: int = 0):
    """Correlate an image (N, C, H, W) with every rotated copy of the kernels.

    Returns a field (N, O, |G|, H', W').
    """
    (image, kernels), numeric = _graph_inputs(image, kernels)
    if image.ndim != 4:
        raise GConvError(f"lift_conv expects (N, C, H, W), got {image.shape}")
    _check_geometry(image.shape[2], kernels.shape[2], stride, padding)
    bank = expand_lift_kernels(kernels, group)
    out = dm.conv2d(image, bank, stride, padding)
    n_, _, h, w = out.shape
    out = dm.reshape(out, (n_, kernels.shape[0], group.order, h, w))
    return out.value if numeric else out


def gconv_layer(field, kernels, group: CyclicGroup, stride: int = 1, padding: int = 0):
    """Group correlation of a field (N, C, |G|, H, W) with kernels (O, C, |G|, k, k)."""
    (field, kernels), numeric = _graph_inputs(field, kernels)
    if field.ndim != 5 or field.shape[2] != group.order:
        raise GConvError(f"field shape {field.shape} does not match C{group.order}")
    if kernels.shape[1] != field.shape[1]:
        raise GConvError("kernel input channels do not match the field")
    _check_geometry(field.shape[3], kernels.shape[3], stride, padding)
    n_, c, n, h, w = field.shape
    bank = expand_group_kernels(kernels, group)
    out = dm.conv2d(dm.reshape(field, (n_, c * n, h, w)), bank, stride, padding)
    out = dm.reshape(out, (n_, kernels.shape[0], n, out.shape[2], out.shape[3]))
    return out.value if numeric else out


def gconv_transpose(field, kernels, group: CyclicGroup, stride: int = 1, padding: int = 0):
    """Adjoint of :func:`gconv_layer` (upsampling when stride is 2).

    ``kernels`` keep the forward layout (O, C, |G|, k, k): the input field has
    O channels, the output has C.
    """
    (field, kernels), numeric = _graph_inputs(field, kernels)
    if field.ndim != 5 or field.shape[2] != group.order:
        raise GConvError(f"field shape {field.shape} does not match C{group.order}")
    if kernels.shape[0] != field.shape[1]:
        raise GConvError("kernel output channels do not match the field")
    n_, o, n, h, w = field.shape
    k = kernels.shape[3]
    out_size = (h - 1) * stride - 2 * padding + k
    _check_geometry(out_size, k, stride, padding)
    bank = expand_group_kernels(kernels, group)
    out = dm.conv_transpose2d(dm.reshape(field, (n_, o * n, h, w)), bank, stride, padding)
    out = dm.reshape(out, (n_, kernels.shape[1], n, out.shape[2], out.shape[3]))
    return out.value if numeric else out


def field_bias(field: dm.Node, bias: dm.Node) -> dm.Node:
    """Add one bias per channel, shared over group and space (keeps equivariance)."""
    c = field.shape[1]
    b = dm.reshape(bias, (1, c, 1, 1, 1))
    return dm.add(field, dm.expand(b, field.shape))


def group_pool(field):
    """Mean over the group axis: (N, C, |G|, H, W) -> (N, C, H, W)."""
    if isinstance(field, dm.Node):
        return dm.mean(field, axis=2)
    return np.mean(field, axis=2)


# --------------------------------------------------------------------------
# equivariance measurement

def matrix_action(rep: Callable[[GroupElement], np.ndarray]):
    """Turn ``g -> matrix`` into an action ``(g, x) -> rep(g) @ x``."""
    return lambda g, x: rep(g) @ x


def regular_action(group: CyclicGroup):
    return matrix_action(lambda g: regular_rep(group, g))


def equivariance_defect(f: Callable, act_in: Callable, act_out: Callable,
                        samples: Iterable, group: CyclicGroup) -> float:
    """Max over samples and group elements of ``||f(T_in x) - T_out f(x)|| / ||f(x)||``.

    If ``f(x)`` vanishes for every sample the absolute error is reported instead.
    """
    samples = list(samples)
    outputs = [np.asarray(f(x)) for x in samples]
    relative = any(np.linalg.norm(y) > 0 for y in outputs)
    worst = 0.0
    for x, fx in zip(samples, outputs):
        scale = np.linalg.norm(fx) if relative else 1.0
        if relative and scale == 0:
            continue
        for g in group:
            lhs = np.asarray(f(act_in(g, x)))
            rhs = np.asarray(act_out(g, fx))
            worst = max(worst, float(np.linalg.norm(lhs - rhs) / scale))
    return worst


__all__ = [
    "GConvError", "group_conv_vec", "build_circulant", "lift_conv", "gconv_layer",
    "gconv_transpose", "field_bias", "group_pool", "equivariance_defect",
    "expand_lift_kernels", "expand_group_kernels", "field_action", "image_action",
    "matrix_action", "regular_action", "spatial_rotation_matrix",
]
