"""Sampling estimates of the recovery-guarantee ingredients and bound audits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .groups import GroupElement
from .recovery import (
    Generator, LinearGenerator, RecoveryConfig, RecoveryResult, as_generator, project,
    recover_equivariant,
)
from .sensing import SensingProblem, measure


class TheoryError(ValueError):
    pass


def ball_sampler(k: int, radius: float):
    """Sampler of points uniform in the k-dimensional ball B_k(radius)."""

    def sample(rng, count):
        d = rng.standard_normal((count, k))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * radius * rng.uniform(size=(count, 1)) ** (1.0 / k)

    return sample


def _flat_outputs(G: Generator, z):
    return np.asarray(G(z)).reshape(len(z), -1)


@dataclass
class SrecEstimate:
    gamma_hat: float
    delta: float
    samples: int
    worst_pair: tuple
    running_min: np.ndarray = field(default_factory=lambda: np.zeros(0))


def estimate_srec(G, A, sampler, pairs: int, delta: float = 0.0, seed=0,
                  batch: int = 256) -> SrecEstimate:
    """gamma_hat = min over sampled pairs of (||A(G z1 - G z2)|| + delta) / ||G z1 - G z2||."""
    if pairs < 1:
        raise TheoryError("pairs must be at least 1")
    G = as_generator(G) if not callable(G) or isinstance(G, Generator) else G
    A = np.asarray(A, dtype=float)
    rng = np.random.default_rng(seed)
    best, worst, used = math.inf, None, 0
    mins = []
    done = 0
    while done < pairs:
        b = min(batch, pairs - done)
        z1, z2 = sampler(rng, b), sampler(rng, b)
        d = _flat_outputs(G, z1) - _flat_outputs(G, z2)
        den = np.linalg.norm(d, axis=1)
        num = np.linalg.norm(d @ A.T, axis=1) + delta
        for i in range(b):
            if den[i] >= 1e-9:
                used += 1
                ratio = num[i] / den[i]
                if ratio < best:
                    best, worst = ratio, (z1[i].copy(), z2[i].copy())
            mins.append(best)
        done += b
    if used == 0:
        raise TheoryError("every sampled pair was degenerate")
    return SrecEstimate(float(best), float(delta), used, worst, np.array(mins))


def estimate_lipschitz(G, sampler, pairs: int, seed=0, batch: int = 256) -> float:
    """Max over sampled pairs of ||G z1 - G z2|| / ||z1 - z2||: a lower bound on L."""
    if pairs < 1:
        raise TheoryError("pairs must be at least 1")
    G = as_generator(G) if isinstance(G, Generator) else G
    rng = np.random.default_rng(seed)
    best, done = 0.0, 0
    while done < pairs:
        b = min(batch, pairs - done)
        z1, z2 = sampler(rng, b), sampler(rng, b)
        num = np.linalg.norm(_flat_outputs(G, z1) - _flat_outputs(G, z2), axis=1)
        den = np.linalg.norm(z1 - z2, axis=1)
        ok = den > 1e-12
        if ok.any():
            best = max(best, float(np.max(num[ok] / den[ok])))
        done += b
    return best


@dataclass(frozen=True)
class Budget:
    """Descent budget for representation-error estimates."""

    max_iters: int = 400
    restarts: int = 5
    lr_z: float = 0.05
    optimizer: str = "gd"
    radius: float | None = None
    seed: int = 0

    @classmethod
    def from_recovery(cls, cfg: RecoveryConfig, seed=None) -> "Budget":
        """Generous budget: five restarts and twice the recovery iterations."""
        return cls(2 * cfg.max_iters, 5, cfg.lr_z, cfg.optimizer, cfg.radius,
                   cfg.seed if seed is None else seed)


def representation_error(G, x, budget: Budget = Budget(), z_init=None) -> float:
    """Upper estimate of min over B_k(r) of ||G(z) - x||, by projected descent.

    Runs the recovery solver with A = I and no early stopping, and reports
    the best distance seen at any iterate of any restart.
    """
    G = as_generator(G)
    x = np.asarray(x, dtype=float)
    n = x.size
    cfg = RecoveryConfig(max_iters=budget.max_iters, lr_z=budget.lr_z, restarts=budget.restarts,
                         optimizer=budget.optimizer, radius=budget.radius, early_stop=False,
                         seed=budget.seed)
    eye = np.eye(n)
    problem = SensingProblem(eye, x.reshape(-1).copy(), None, None, 0.0, np.zeros(n), None)
    res = recover_equivariant(problem, G, cfg, z_init=z_init)
    return float(min(res.residual_trace))


@dataclass
class BoundAudit:
    lhs: float
    representation_error: float
    noise_norm: float
    delta_approx: float
    delta: float
    rhs: float
    holds: bool
    gamma_hat: float | None = None
    chain_rhs: float | None = None
    chain_holds: bool | None = None

    def record(self) -> dict:
        return {k: (None if v is None else (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)))
                for k, v in self.__dict__.items()}


def bound_rhs(rep: float, noise: float, delta_approx: float, delta: float) -> float:
    return 6.0 * rep + 3.0 * noise + 2.0 * delta_approx + 2.0 * delta


def audit_bound(problem: SensingProblem, G, result: RecoveryResult, delta: float,
                budget: Budget = Budget(), gamma_hat: float | None = None,
                z_init=None, rep: float | None = None) -> BoundAudit:
    """Compare ||x_hat - T_g x*|| with 6 rep + 3 ||eps|| + 2 delta_approx + 2 delta.

    With ``gamma_hat`` the S-REC chain ``(||y - A x_hat|| + ||eps|| + delta) / gamma_hat``
    is also evaluated; it is the step of the argument that fails first when
    the measurements are too few.  ``rep`` skips the representation-error
    search when the caller already has it for this signal.
    """
    if problem.x_star is None:
        raise TheoryError("the audit needs the ground-truth signal")
    truth = problem.rotated_signal().reshape(-1)
    x_hat = np.asarray(result.x_hat).reshape(-1)
    lhs = float(np.linalg.norm(x_hat - truth))
    if rep is None:
        rep = representation_error(G, problem.x_star, budget, z_init)
    noise = float(np.linalg.norm(problem.epsilon))
    rhs = bound_rhs(rep, noise, result.delta_approx, delta)
    audit = BoundAudit(lhs, rep, noise, float(result.delta_approx), float(delta), rhs, lhs <= rhs)
    if gamma_hat is not None:
        resid = float(np.linalg.norm(problem.y - problem.A @ x_hat))
        chain = (resid + noise + delta) / gamma_hat if gamma_hat > 0 else math.inf
        audit.gamma_hat, audit.chain_rhs, audit.chain_holds = gamma_hat, chain, lhs <= chain
    return audit


def measurement_count(k: int, lipschitz: float, radius: float, delta: float, C: float = 1.0) -> int:
    """m = ceil(C k log(L r / delta)), the size used for audits."""
    return max(1, int(math.ceil(C * k * math.log(max(lipschitz * radius / delta, math.e)))))


# --------------------------------------------------------------------------
# linear suite

@dataclass
class LinearSuite:
    """A random generator G(z) = B z with orthonormal columns."""

    B: np.ndarray
    generator: LinearGenerator

    @classmethod
    def create(cls, n: int = 64, k: int = 4, seed=0, shape=None) -> "LinearSuite":
        rng = np.random.default_rng(seed)
        B, _ = np.linalg.qr(rng.standard_normal((n, k)))
        return cls(B, LinearGenerator(B, shape))


def linear_audit(suite: LinearSuite, trials: int = 100, m: int | None = None, noise_std: float = 0.01,
                 delta: float = 1e-2, off_range: float = 0.05, seed: int = 0,
                 cfg: RecoveryConfig | None = None, C: float = 1.0):
    """Bound audits on problems whose signals sit near the range of B.

    Returns the list of :class:`BoundAudit` records.
    """
    from .sensing import gaussian_matrix
    n, k = suite.B.shape
    cfg = cfg or RecoveryConfig(max_iters=300, lr_z=0.2, restarts=1, early_stop=False)
    radius = cfg.ball_radius(k)
    if m is None:
        m = measurement_count(k, 1.0, radius, delta, C)
    audits = []
    ss = np.random.SeedSequence(seed)
    for t, child in enumerate(ss.spawn(trials)):
        rng = np.random.default_rng(child)
        z = project(rng.standard_normal((1, k)), radius)[0]
        x = suite.B @ z + off_range * rng.standard_normal(n) / math.sqrt(n)
        A = gaussian_matrix(m, n, rng)
        prob = measure(x, A, None, noise_std, int(rng.integers(2**31)))
        lr = 0.5 / max(np.linalg.norm(A @ suite.B, 2) ** 2, 1e-12)
        res = recover_equivariant(prob, suite.generator, replace(cfg, lr_z=lr, seed=t))
        audits.append(audit_bound(prob, suite.generator, res, delta,
                                  Budget(400, 1, 0.5, seed=t)))
    return audits


def rotate_problem_signal(problem: SensingProblem, g: GroupElement) -> SensingProblem:
    """The same problem with x* replaced by T_g x* (same A and noise seed)."""
    from .sensing import transform_signal
    return measure(transform_signal(problem.x_star, g), problem.A, problem.g_star,
                   problem.noise_std, problem.seed)
