"""The desk-scale toy suite: dataset, model presets and problem generation."""
from __future__ import annotations

import math

import numpy as np

from .data import Dataset, synth_oriented, split
from .groups import CyclicGroup
from .models import TrainConfig, build_model
from .sensing import SensingProblem, gaussian_matrix, measure

TOY_DATA = {"count": 600, "size": 16, "seed": 0, "fractions": (500 / 600, 50 / 600, 50 / 600)}

# Channel widths keep (channels x |G|) at 32 for C4 and C8; C16 gets twice
# that and a 32-dim latent because its smooth 3x3 kernels are less expressive.
# Latent size is 16 elsewhere except the MLP.
PRESETS = {
    "eq4": {"kind": "eq", "group_order": 4, "latent_dim": 16, "channels": (8, 8, 8)},
    "eq8": {"kind": "eq", "group_order": 8, "latent_dim": 16, "channels": (4, 4, 4)},
    "eq16": {"kind": "eq", "group_order": 16, "latent_dim": 32, "channels": (4, 4, 4)},
    "conv": {"kind": "conv", "latent_dim": 16, "channels": (32, 32, 32)},
    "aug": {"kind": "aug", "latent_dim": 16, "channels": (32, 32, 32)},
    "cond": {"kind": "cond", "latent_dim": 16, "channels": (32, 32, 32)},
    "mlp": {"kind": "mlp", "latent_dim": 20, "hidden": 128},
}


def toy_dataset(count=None, size=None, seed=None) -> Dataset:
    count = TOY_DATA["count"] if count is None else count
    size = TOY_DATA["size"] if size is None else size
    seed = TOY_DATA["seed"] if seed is None else seed
    return split(synth_oriented(count, size, seed=seed), TOY_DATA["fractions"], seed=seed)


def preset_model(name: str, seed: int = 0, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return build_model(**{**PRESETS[name], **overrides, "seed": seed})


def toy_train_config(epochs: int = 50, seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=32, lr=1e-3, seed=seed)


def make_problem(images: np.ndarray, m: int, scenario: str, trial: int, seed,
                 rotation: str = "quarter", noise_std: float = 0.0) -> SensingProblem:
    """One benchmark problem drawn from ``images``.

    ``scenario`` is ``"no-rotation"`` or ``"unknown-rotation"``; in the latter
    the orientation is a uniformly drawn non-identity quarter turn
    (``rotation="quarter"``) or a uniform angle in [0, 2 pi)
    (``rotation="continuous"``).  The image index cycles with the trial so
    that paired runs see the same signal; A and the noise draw do not depend
    on the scenario.
    """
    rng = np.random.default_rng(seed)
    x = images[trial % len(images)]
    A = gaussian_matrix(m, x.size, rng)
    noise_seed = int(rng.integers(2**31))
    g = None
    if scenario == "unknown-rotation":
        if rotation == "quarter":
            g = CyclicGroup(4).element(int(rng.integers(1, 4)))
        elif rotation == "continuous":
            g = float(rng.uniform(0.0, 2.0 * math.pi))
        else:
            raise ValueError(f"unknown rotation family {rotation!r}")
    elif scenario != "no-rotation":
        raise ValueError(f"unknown scenario {scenario!r}")
    return measure(x, A, g, noise_std, noise_seed)


def problem_factory(images, rotation="quarter", noise_std=0.0):
    def factory(m, scenario, trial, seed):
        return make_problem(images, m, scenario, trial, seed, rotation, noise_std)
    return factory
