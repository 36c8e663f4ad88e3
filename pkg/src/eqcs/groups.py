"""Cyclic groups, their unitary representations, and image rotation.

Conventions (frozen; the equivariance tests depend on them):

* ``regular_rep(G, g_s)`` shifts coordinates forward: ``(P x)[i] = x[(i - s) mod n]``,
  so ``g_1`` of C4 maps ``(1, 2, 3, 4)`` to ``(4, 1, 2, 3)``.
* Image rotation by ``theta`` is counter-clockwise as displayed (row 0 on top),
  about the center ``((h-1)/2, (w-1)/2)``.  A quarter turn is ``np.rot90``:
  ``out[i, j] = in[j, n-1-i]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import block_diag

from . import diffmath as dm


class GroupError(ValueError):
    pass


@dataclass(frozen=True)
class GroupElement:
    index: int
    order: int

    def __post_init__(self):
        if not 0 <= self.index < self.order:
            raise GroupError(f"index {self.index} out of range for C{self.order}")

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return compose(self, other)

    @property
    def inverse(self) -> "GroupElement":
        return GroupElement((-self.index) % self.order, self.order)

    @property
    def angle(self) -> float:
        return angle_of(self)


@dataclass(frozen=True)
class CyclicGroup:
    order: int

    def __post_init__(self):
        if self.order < 1:
            raise GroupError("group order must be positive")

    def __len__(self) -> int:
        return self.order

    def __iter__(self):
        return iter(self.elements())

    def element(self, index: int) -> GroupElement:
        return GroupElement(index % self.order, self.order)

    def elements(self) -> list[GroupElement]:
        return [GroupElement(i, self.order) for i in range(self.order)]

    @property
    def identity(self) -> GroupElement:
        return GroupElement(0, self.order)

    def __contains__(self, g) -> bool:
        return isinstance(g, GroupElement) and g.order == self.order


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    if a.order != b.order:
        raise GroupError(f"cannot compose elements of C{a.order} and C{b.order}")
    return GroupElement((a.index + b.index) % a.order, a.order)


def angle_of(g: GroupElement) -> float:
    return 2.0 * math.pi * g.index / g.order


def _check_member(group: CyclicGroup, g: GroupElement) -> None:
    if g not in group:
        raise GroupError(f"{g} is not an element of C{group.order}")


def shift_index(n: int, s: int) -> np.ndarray:
    """Gather index realizing the regular action: ``x[shift_index(n, s)] == P_s x``."""
    return (np.arange(n) - s) % n


def regular_rep(group: CyclicGroup, g: GroupElement) -> np.ndarray:
    _check_member(group, g)
    n = group.order
    P = np.zeros((n, n))
    P[np.arange(n), shift_index(n, g.index)] = 1.0
    return P


def latent_rep(group: CyclicGroup, g: GroupElement, multiplicity: int) -> np.ndarray:
    """Block-diagonal sum of ``multiplicity`` regular representations.

    The latent vector is laid out ``[channel][group]``, matching a flattened
    group feature field with one spatial site.
    """
    if multiplicity < 1:
        raise GroupError("multiplicity must be at least 1")
    block = regular_rep(group, g)
    return block_diag(*([block] * multiplicity))


def latent_action(group: CyclicGroup, g: GroupElement, z):
    """Apply the latent representation to ``z`` (..., k) without building the matrix."""
    _check_member(group, g)
    n = group.order
    k = z.shape[-1]
    if k % n:
        raise GroupError(f"latent dimension {k} is not divisible by |G|={n}")
    idx = (np.arange(k) // n) * n + shift_index(n, g.index)[np.arange(k) % n]
    if isinstance(z, dm.Node):
        return dm.take(z, idx, axis=-1)
    return np.asarray(z)[..., idx]


def is_quarter_turn(g: GroupElement) -> bool:
    return (4 * g.index) % g.order == 0


# --------------------------------------------------------------------------
# image rotation

def _bilinear_plan(h: int, w: int, theta: float):
    """Source coordinates and their angle derivatives for every output pixel."""
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    di, dj = ii - cr, jj - cc
    c, s = math.cos(theta), math.sin(theta)
    si = c * di + s * dj + cr
    sj = -s * di + c * dj + cc
    dsi = -s * di + c * dj
    dsj = -c * di - s * dj
    return si, sj, dsi, dsj


def _corners(si, sj, h, w):
    i0 = np.floor(si).astype(np.intp)
    j0 = np.floor(sj).astype(np.intp)
    fi, fj = si - i0, sj - j0
    out = []
    for di, dj in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ci, cj = i0 + di, j0 + dj
        wi = fi if di else 1.0 - fi
        wj = fj if dj else 1.0 - fj
        # derivative of the weight w.r.t. the source coordinates
        dwi = 1.0 if di else -1.0
        dwj = 1.0 if dj else -1.0
        valid = (ci >= 0) & (ci < h) & (cj >= 0) & (cj < w)
        out.append((np.clip(ci, 0, h - 1), np.clip(cj, 0, w - 1), wi * wj * valid,
                    dwi * wj * valid, wi * dwj * valid))
    return out


def _sampling_matrices(h: int, w: int, theta: float):
    """Sparse sampling matrix ``M`` and its angle derivative ``D`` (rows = output pixels)."""
    si, sj, dsi, dsj = _bilinear_plan(h, w, theta)
    rows = np.tile(np.arange(h * w), 4)
    cols, wts, dws = [], [], []
    for ci, cj, wt, dwi, dwj in _corners(si, sj, h, w):
        cols.append((ci * w + cj).reshape(-1))
        wts.append(wt.reshape(-1))
        dws.append((dwi * dsi + dwj * dsj).reshape(-1))
    cols = np.concatenate(cols)
    M = sparse.csr_matrix((np.concatenate(wts), (rows, cols)), shape=(h * w, h * w))
    D = sparse.csr_matrix((np.concatenate(dws), (rows, cols)), shape=(h * w, h * w))
    return M, D


def bilinear_matrix(h: int, w: int, theta: float) -> np.ndarray:
    """Dense (h*w x h*w) matrix of bilinear rotation by ``theta`` acting on ``vec(image)``."""
    return _sampling_matrices(h, w, theta)[0].toarray()


def _apply(mat, x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    flat = x.reshape(-1, h * w)
    return np.asarray((mat @ flat.T).T).reshape(x.shape)


def rotate_bilinear(image, angle):
    """Differentiable bilinear rotation.

    ``image`` is (..., h, w); ``angle`` is a scalar or a vector with one angle
    per entry of the leading axis.  Either may be a :class:`~eqcs.diffmath.Node`.
    Samples falling outside the grid read as zero.
    """
    is_graph = isinstance(image, dm.Node) or isinstance(angle, dm.Node)
    if is_graph:
        graph = dm._graph_of(image, angle)
        image, angle = dm._lift(graph, image), dm._lift(graph, angle)
        img, th = image.value, angle.value
    else:
        img, th = np.asarray(image, dtype=float), np.asarray(angle, dtype=float)
    scalar = th.ndim == 0
    if scalar:
        img, th = img[None], th.reshape(1)
    if th.shape[0] != img.shape[0]:
        raise dm.ShapeError("one angle per leading image axis is required")
    h, w = img.shape[-2:]
    mats = [_sampling_matrices(h, w, float(t)) for t in th]
    out = np.stack([_apply(M, img[b]) for b, (M, _) in enumerate(mats)])
    if not is_graph:
        return out[0] if scalar else out

    def back(g):
        g = g[None] if scalar else g
        g_img = np.stack([_apply(M.T, g[b]) for b, (M, _) in enumerate(mats)])
        g_ang = np.array([np.sum(g[b] * _apply(D, img[b])) for b, (_, D) in enumerate(mats)])
        if scalar:
            return g_img[0], g_ang.reshape(())
        return g_img, g_ang

    return graph.record("rotate_bilinear", out[0] if scalar else out, (image, angle), back)


def rotate_quarter(image, quarters: int):
    """Exact rotation by ``quarters`` * 90 degrees over the last two axes."""
    q = quarters % 4
    if isinstance(image, dm.Node):
        h, w = image.shape[-2:]
        if q % 2 and h != w:
            raise GroupError("exact quarter rotation needs a square image")
        idx = np.rot90(np.arange(h * w).reshape(h, w), q).reshape(-1)
        flat = dm.reshape(image, (*image.shape[:-2], h * w))
        return dm.reshape(dm.take(flat, idx, axis=-1), image.shape)
    image = np.asarray(image)
    if q % 2 and image.shape[-1] != image.shape[-2]:
        raise GroupError("exact quarter rotation needs a square image")
    return np.rot90(image, q, axes=(-2, -1)).copy()


def rotate_image(image, g_or_angle, mode: str = "bilinear"):
    """Rotate an image (or a stack, last two axes spatial).

    ``g_or_angle`` is a :class:`GroupElement` or an angle in radians.
    ``mode`` is ``"exact-quarter"`` or ``"bilinear"``.
    """
    if isinstance(g_or_angle, GroupElement):
        theta = angle_of(g_or_angle)
    else:
        theta = g_or_angle
    if mode == "exact-quarter":
        h, w = image.shape[-2:]
        if h != w:
            raise GroupError("exact quarter rotation needs a square image")
        t = float(theta.value if isinstance(theta, dm.Node) else theta)
        q = t / (math.pi / 2)
        if abs(q - round(q)) > 1e-9:
            raise GroupError(f"angle {t} is not a multiple of 90 degrees")
        return rotate_quarter(image, int(round(q)))
    if mode == "bilinear":
        return rotate_bilinear(image, theta)
    raise GroupError(f"unknown rotation mode {mode!r}")


def image_action(g: GroupElement, image):
    """The signal-space action T_g^x: exact for quarter turns, bilinear otherwise."""
    if is_quarter_turn(g):
        return rotate_quarter(image, (4 * g.index) // g.order)
    return rotate_bilinear(image, angle_of(g))


def field_action(g: GroupElement, field):
    """Act on a group feature field (..., |G|, h, w): rotate space, shift the group axis."""
    n = g.order
    if field.shape[-3] != n:
        raise GroupError(f"group axis has length {field.shape[-3]}, expected {n}")
    rotated = image_action(g, field)
    idx = shift_index(n, g.index)
    if isinstance(rotated, dm.Node):
        return dm.take(rotated, idx, axis=-3)
    return np.take(rotated, idx, axis=-3)
