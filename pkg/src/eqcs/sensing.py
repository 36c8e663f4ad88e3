"""Measurement model y = A T_g x + eps with Gaussian sensing matrices."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .groups import GroupElement, image_action, rotate_bilinear


class SensingError(ValueError):
    pass


def gaussian_matrix(m: int, n: int, seed) -> np.ndarray:
    """(m, n) matrix with i.i.d. N(0, 1/m) entries from a seeded generator."""
    if m < 1 or n < 1:
        raise SensingError("matrix dimensions must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, n))


def transform_signal(x, g) -> np.ndarray:
    """Apply T_g to a signal: a group element, an angle in radians, or None (identity)."""
    x = np.asarray(x, dtype=float)
    if g is None:
        return x.copy()
    if x.ndim != 2:
        raise SensingError("rotations act on 2-D signals; pass the image, not its vector")
    if isinstance(g, GroupElement):
        return image_action(g, x)
    return rotate_bilinear(x, float(g))


@dataclass(frozen=True)
class SensingProblem:
    A: np.ndarray
    y: np.ndarray
    x_star: np.ndarray
    g_star: object  # GroupElement, angle in radians, or None
    noise_std: float
    epsilon: np.ndarray
    seed: object

    @property
    def signal_shape(self) -> tuple:
        return self.x_star.shape

    @property
    def measurements(self) -> int:
        return self.A.shape[0]

    def rotated_signal(self) -> np.ndarray:
        """T_{g*} x*, the signal actually seen by the sensor (in its own shape)."""
        return transform_signal(self.x_star, self.g_star)

    def clean_measurements(self) -> np.ndarray:
        return self.A @ self.rotated_signal().reshape(-1)

    def replay_y(self) -> np.ndarray:
        return self.clean_measurements() + self.epsilon

    def with_rotation(self, g) -> "SensingProblem":
        """Same x*, A, and noise draw observed under a different transformation."""
        return measure(self.x_star, self.A, g, self.noise_std, self.seed)


def measure(x, A, g=None, noise_std: float = 0.0, seed=0) -> SensingProblem:
    """Synthesize ``y = A T_g x + eps`` with ``eps ~ N(0, noise_std^2 I)``."""
    x = np.asarray(x, dtype=float)
    A = np.asarray(A, dtype=float)
    if noise_std < 0:
        raise SensingError("noise_std must be non-negative")
    if A.ndim != 2 or A.shape[1] != x.size:
        raise SensingError(f"A has shape {A.shape} but the signal has {x.size} entries")
    if A.shape[0] >= A.shape[1]:
        warnings.warn("measurement count is not below the signal dimension", stacklevel=2)
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, noise_std, size=A.shape[0]) if noise_std > 0 else np.zeros(A.shape[0])
    y = A @ transform_signal(x, g).reshape(-1) + eps
    x = x.copy()
    for arr in (A, y, x, eps):
        arr.setflags(write=False)
    return SensingProblem(A, y, x, g, float(noise_std), eps, seed)


def norm_condition_trial(x, m: int, n: int | None = None, trials: int = 100_000, seed=0,
                         chunk: int = 4096) -> float:
    """Fraction of sampled Gaussian A (m x n) with ``||A x|| > 2 ||x||``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size if n is None else n
    if x.size != n:
        raise SensingError("x must have n entries")
    if trials < 1:
        raise SensingError("trials must be at least 1")
    nx = np.linalg.norm(x)
    if nx == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        A = rng.normal(0.0, 1.0 / np.sqrt(m), size=(b, m, n))
        hits += int(np.sum(np.linalg.norm(A @ x, axis=1) > 2.0 * nx))
        done += b
    return hits / trials
