"""Latent-space recovery: rotation-aware, coordinate (z, angle) and conditional schemes.

All restarts of one run advance in lock-step as a batch.  After every
iteration the start with the lowest measurement residual is the current
estimate; a run stops as soon as that estimate is converged.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffmath as dm
from .groups import rotate_bilinear
from .models import VAEModel, decoder_logits, graph_params
from .sensing import SensingProblem

SCHEMES = ("plain", "coordinate", "conditional")


class RecoveryError(ValueError):
    pass


# --------------------------------------------------------------------------
# generators

class Generator:
    """A differentiable map from latent batches (S, k) to signals (S, *output_shape)."""

    latent_dim: int
    output_shape: tuple
    conditional = False
    group_order = 1
    rotation_aware = False

    def graph(self, z: dm.Node, angle: dm.Node | None = None) -> dm.Node:
        raise NotImplementedError

    def __call__(self, z, angle=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        gr = dm.ValueGraph()
        a = None
        if angle is not None:
            a = gr.constant(np.broadcast_to(np.asarray(angle, dtype=float), (len(np.atleast_2d(z)),)))
        out = self.graph(gr.constant(np.atleast_2d(z)), a).value
        return out[0] if single else out


class LinearGenerator(Generator):
    """G(z) = B z, optionally reshaped to an image."""

    def __init__(self, B, output_shape=None):
        self.B = np.asarray(B, dtype=float)
        self.latent_dim = self.B.shape[1]
        self.output_shape = tuple(output_shape) if output_shape else (self.B.shape[0],)
        if int(np.prod(self.output_shape)) != self.B.shape[0]:
            raise RecoveryError("output shape does not match the generator's rows")

    def graph(self, z, angle=None):
        out = dm.matmul(z, self.B.T)
        return dm.reshape(out, (z.shape[0], *self.output_shape))


class VAEGenerator(Generator):
    """The decoder mean of a trained VAE."""

    def __init__(self, model: VAEModel):
        self.model = model
        self.latent_dim = model.latent_dim
        s = model.image_size
        self.output_shape = (s,) if model.kind == "linear" else (s, s)
        self.conditional = model.is_conditional
        self.group_order = model.group_order
        self.rotation_aware = model.kind in ("eq", "aug")

    def graph(self, z, angle=None):
        P = graph_params(self.model, z.graph)
        logits = decoder_logits(self.model, z, P, angle)
        return dm.sigmoid(logits) if self.model.likelihood == "bernoulli" else logits


def as_generator(G) -> Generator:
    if isinstance(G, Generator):
        return G
    if isinstance(G, VAEModel):
        return VAEGenerator(G)
    raise RecoveryError(f"cannot use {type(G).__name__} as a generator")


# --------------------------------------------------------------------------
# configuration and results

@dataclass(frozen=True)
class RecoveryConfig:
    max_iters: int = 200
    lr_z: float = 0.05
    lr_angle: float = 0.05
    restarts: int = 3
    angle_grid: int | None = None  # None: |G| of the prior (8 for continuous priors)
    tau: float = 0.01
    radius: float | None = None  # None: 3 sqrt(k)
    optimizer: str = "gd"
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise RecoveryError("tau must be positive")
        if self.restarts < 1:
            raise RecoveryError("at least one restart is required")
        if self.radius is not None and self.radius <= 0:
            raise RecoveryError("radius must be positive")
        if self.max_iters < 0:
            raise RecoveryError("max_iters must be non-negative")
        if self.optimizer not in ("gd", "adam"):
            raise RecoveryError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_z <= 0 or self.lr_angle <= 0:
            raise RecoveryError("step sizes must be positive")
        if self.angle_grid is not None and self.angle_grid < 1:
            raise RecoveryError("angle grid needs at least one start")

    def ball_radius(self, k: int) -> float:
        return self.radius if self.radius is not None else 3.0 * math.sqrt(k)


@dataclass
class RecoveryResult:
    z_hat: np.ndarray
    g_hat: float | None
    x_hat: np.ndarray
    iterations: int
    gradient_steps: int
    residual_trace: list
    converged: bool
    mse: float | None
    delta_approx: float
    scheme: str
    assessed_on: str = "signal"
    aborted_restarts: int = 0
    final_residual: float = 0.0
    start_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def record(self) -> dict:
        return {
            "scheme": self.scheme, "iterations": self.iterations,
            "gradient_steps": self.gradient_steps, "converged": bool(self.converged),
            "mse": None if self.mse is None else float(self.mse),
            "delta_approx": float(self.delta_approx), "final_residual": float(self.final_residual),
            "g_hat": None if self.g_hat is None else float(self.g_hat),
            "assessed_on": self.assessed_on, "aborted_restarts": self.aborted_restarts,
            "z_hat": [float(v) for v in self.z_hat], "x_hat": np.asarray(self.x_hat).reshape(-1).tolist(),
            "residual_trace": [float(v) for v in self.residual_trace],
        }


def is_converged(x_hat, x_true, tau: float = 0.01):
    """Per-pixel MSE ``||x_hat - x||^2 / n`` and the strict test ``MSE < tau``."""
    x_hat, x_true = np.asarray(x_hat, dtype=float), np.asarray(x_true, dtype=float)
    if x_hat.size != x_true.size:
        raise RecoveryError("x_hat and x_true differ in size")
    mse = float(np.sum((x_hat.reshape(-1) - x_true.reshape(-1)) ** 2) / x_true.size)
    return mse < tau, mse


# --------------------------------------------------------------------------
# descent engine

def project(z: np.ndarray, radius: float) -> np.ndarray:
    """Radial projection of each row onto the ball of the given radius."""
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    scale = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
    return z * scale


class _Moments:
    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m, self.v = np.zeros(shape), np.zeros(shape)
        self.b1, self.b2, self.eps, self.t = beta1, beta2, eps, 0

    def direction(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return mh / (np.sqrt(vh) + self.eps)


def _signals(G: Generator, z, angle, mode):
    if mode == "coordinate":
        img = G.graph(z)
        if len(G.output_shape) != 2:
            raise RecoveryError("the coordinate scheme needs an image-valued generator")
        return rotate_bilinear(img, angle)
    if mode == "conditional":
        return G.graph(z, angle)
    return G.graph(z)


def _evaluate(G, A, y, z, angle, mode, want_z=True, want_angle=False):
    """Per-start squared residuals, signals, and requested gradients."""
    gr = dm.ValueGraph()
    zn = gr.leaf(z) if want_z else gr.constant(z)
    an = None
    if angle is not None:
        an = gr.leaf(angle) if want_angle else gr.constant(angle)
    x = _signals(G, zn, an, mode)
    s = z.shape[0]
    flat = dm.reshape(x, (s, int(np.prod(x.shape[1:]))))
    r = dm.sub(dm.matmul(flat, A.T), np.broadcast_to(y, (s, y.size)))
    per = dm.sum_(dm.square(r), axis=1)
    grads = gr.backward(dm.sum_(per)) if (want_z or want_angle) else {}
    gz = grads.get(zn) if want_z else None
    ga = grads.get(an) if want_angle else None
    return per.value, flat.value, gz, ga


def _safe_evaluate(G, A, y, z, angle, alive, mode, want_z, want_angle):
    """Evaluate alive starts; starts whose loss is non-finite are aborted."""
    k = z.shape[1]
    S = z.shape[0]
    n = int(np.prod(_output_shape(G)))
    loss = np.full(S, np.inf)
    xs = np.zeros((S, n))
    gz, ga = np.zeros((S, k)), np.zeros(S)
    idx = np.flatnonzero(alive)
    if idx.size == 0:
        return loss, xs, gz, ga, alive
    groups = [idx]
    try:
        out = [_evaluate(G, A, y, z[idx], None if angle is None else angle[idx], mode,
                         want_z, want_angle)]
    except (dm.NonFiniteError, FloatingPointError):
        groups, out = [], []
        alive = alive.copy()
        for i in idx:
            try:
                out.append(_evaluate(G, A, y, z[[i]], None if angle is None else angle[[i]],
                                     mode, want_z, want_angle))
                groups.append(np.array([i]))
            except (dm.NonFiniteError, FloatingPointError):
                alive[i] = False
    for sel, (l_, x_, gz_, ga_) in zip(groups, out):
        if not np.all(np.isfinite(l_)):
            alive = alive.copy()
            alive[sel[~np.isfinite(l_)]] = False
        loss[sel], xs[sel] = l_, x_
        if gz_ is not None:
            gz[sel] = gz_
        if ga_ is not None:
            ga[sel] = ga_
    loss[~alive] = np.inf
    return loss, xs, gz, ga, alive


def _output_shape(G: Generator):
    return G.output_shape


def initial_latents(k: int, restarts: int, seed) -> np.ndarray:
    """Restart initializations z ~ N(0, I); a prefix of a fixed seeded sequence."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((restarts, k))


def _angle_starts(G: Generator, cfg: RecoveryConfig) -> np.ndarray:
    count = cfg.angle_grid or (G.group_order if G.group_order > 1 else 8)
    return 2.0 * math.pi * np.arange(count) / count


def _descend(problem: SensingProblem, G: Generator, cfg: RecoveryConfig, mode: str,
             z0: np.ndarray, a0: np.ndarray | None, update_angle: bool, joint: bool) -> RecoveryResult:
    A, y = np.asarray(problem.A), np.asarray(problem.y)
    k = G.latent_dim
    radius = cfg.ball_radius(k)
    z = project(np.array(z0, dtype=float), radius)
    angle = None if a0 is None else np.array(a0, dtype=float)
    S = z.shape[0]
    alive = np.ones(S, dtype=bool)
    truth = None
    if problem.x_star is not None:
        truth = problem.rotated_signal().reshape(-1)
    m = A.shape[0]
    mom_z = _Moments(z.shape) if cfg.optimizer == "adam" else None
    mom_a = _Moments((S,)) if (cfg.optimizer == "adam" and angle is not None) else None
    lr_angle = cfg.lr_z if joint else cfg.lr_angle

    trace, steps = [], 0
    best_seen = np.inf
    converged, iters = False, cfg.max_iters
    for t in range(cfg.max_iters + 1):
        want_angle = update_angle and (joint or mode == "conditional")
        loss, xs, gz, ga, alive = _safe_evaluate(G, A, y, z, angle, alive, mode,
                                                 want_z=t < cfg.max_iters, want_angle=want_angle and t < cfg.max_iters)
        if not alive.any():
            raise RecoveryError("every restart produced a non-finite loss")
        best = int(np.argmin(loss))
        res = math.sqrt(loss[best])
        trace.append(res)
        best_seen = min(best_seen, res)
        if truth is not None:
            ok, _ = is_converged(xs[best], truth, cfg.tau)
        else:
            ok = loss[best] / m < cfg.tau
        if ok and cfg.early_stop:
            converged, iters = True, t
            break
        if t == cfg.max_iters:
            break
        # z step
        dz = mom_z.direction(gz) if mom_z else gz
        z = np.where(alive[:, None], project(z - cfg.lr_z * dz, radius), z)
        steps += 1
        if angle is not None and update_angle:
            if not want_angle:
                # coordinate scheme: fresh angle gradient at the updated z
                _, _, _, ga, alive = _safe_evaluate(G, A, y, z, angle, alive, mode,
                                                    want_z=False, want_angle=True)
                steps += 1
            da = mom_a.direction(ga) if mom_a else ga
            angle = np.where(alive, angle - lr_angle * da, angle)

    last_loss = loss
    best = int(np.argmin(last_loss))
    x_hat = xs[best].reshape(_output_shape(G))
    final_res = math.sqrt(last_loss[best])
    if truth is not None:
        ok, mse = is_converged(x_hat, truth, cfg.tau)
        assessed = "signal"
    else:
        mse = float(last_loss[best] / m)
        ok = mse < cfg.tau
        assessed = "measurements"
    g_hat = None if angle is None else float(angle[best] % (2.0 * math.pi))
    return RecoveryResult(
        z_hat=z[best].copy(), g_hat=g_hat, x_hat=x_hat, iterations=iters, gradient_steps=steps,
        residual_trace=trace, converged=bool(ok), mse=mse,
        delta_approx=max(0.0, final_res - best_seen), scheme=mode, assessed_on=assessed,
        aborted_restarts=int(np.sum(~alive)), final_residual=final_res,
        start_residuals=np.sqrt(last_loss))


def _starts(G: Generator, cfg: RecoveryConfig, z_init):
    if z_init is None:
        return initial_latents(G.latent_dim, cfg.restarts, cfg.seed)
    z0 = np.atleast_2d(np.asarray(z_init, dtype=float))
    if z0.shape[1] != G.latent_dim:
        raise RecoveryError(f"initial latents need {G.latent_dim} coordinates")
    return z0


def recover_equivariant(problem: SensingProblem, G, cfg: RecoveryConfig = RecoveryConfig(),
                        z_init=None) -> RecoveryResult:
    """Descend ``||y - A G(z)||^2`` over z only; rotations are absorbed by the prior."""
    G = as_generator(G)
    if G.conditional:
        raise RecoveryError("the plain scheme needs an unconditional prior")
    return _descend(problem, G, cfg, "plain", _starts(G, cfg, z_init), None, False, False)


def _grid_starts(G, cfg, z_init, angle_init):
    z0 = _starts(G, cfg, z_init)
    angles = _angle_starts(G, cfg) if angle_init is None else np.atleast_1d(
        np.asarray(angle_init, dtype=float))
    zz = np.repeat(z0, len(angles), axis=0)
    aa = np.tile(angles, len(z0))
    return zz, aa


def recover_coordinate(problem: SensingProblem, G, cfg: RecoveryConfig = RecoveryConfig(),
                       z_init=None, angle_init=None, freeze_angle: bool = False,
                       joint: bool = False) -> RecoveryResult:
    """Alternate one z step and one angle step on ``||y - A T_a G(z)||^2``.

    Starts are the restarts crossed with an angle grid.  ``joint=True`` gives
    the simultaneous variant, which updates both blocks from one gradient with
    the z step size.
    """
    G = as_generator(G)
    if G.conditional:
        raise RecoveryError("the coordinate scheme needs an unconditional canonical-pose prior")
    zz, aa = _grid_starts(G, cfg, z_init, angle_init)
    return _descend(problem, G, cfg, "coordinate", zz, aa, not freeze_angle, joint)


def recover_joint(problem: SensingProblem, G, cfg: RecoveryConfig = RecoveryConfig(),
                  z_init=None, angle_init=None) -> RecoveryResult:
    return recover_coordinate(problem, G, cfg, z_init, angle_init, joint=True)


def recover_conditional(problem: SensingProblem, G, cfg: RecoveryConfig = RecoveryConfig(),
                        z_init=None, angle_init=None, freeze_angle: bool = False) -> RecoveryResult:
    """Joint descent over (z, angle) through a conditional decoder G(z, angle)."""
    G = as_generator(G)
    if not G.conditional:
        raise RecoveryError("the conditional scheme needs a conditional prior")
    zz, aa = _grid_starts(G, cfg, z_init, angle_init)
    return _descend(problem, G, cfg, "conditional", zz, aa, not freeze_angle, False)


def recover(problem, G, cfg: RecoveryConfig, scheme: str, **kwargs) -> RecoveryResult:
    if scheme == "plain":
        return recover_equivariant(problem, G, cfg, **kwargs)
    if scheme == "coordinate":
        return recover_coordinate(problem, G, cfg, **kwargs)
    if scheme == "joint":
        return recover_joint(problem, G, cfg, **kwargs)
    if scheme == "conditional":
        return recover_conditional(problem, G, cfg, **kwargs)
    raise RecoveryError(f"unknown scheme {scheme!r}")


def check_scheme(G, scheme: str) -> None:
    """Reject scheme/prior combinations that do not make sense."""
    G = as_generator(G)
    if scheme == "conditional" and not G.conditional:
        raise RecoveryError("scheme 'conditional' needs a conditional checkpoint")
    if scheme in ("coordinate", "joint") and G.conditional:
        raise RecoveryError(f"scheme {scheme!r} needs a canonical-pose (unconditional) checkpoint")
    if scheme == "plain" and G.conditional:
        raise RecoveryError("scheme 'plain' needs a rotation-aware unconditional checkpoint")
    if scheme not in ("plain", "coordinate", "joint", "conditional"):
        raise RecoveryError(f"unknown scheme {scheme!r}")


# --------------------------------------------------------------------------
# benchmark

SCENARIOS = ("no-rotation", "unknown-rotation")
TABLE_COLUMNS = ("scenario", "model", "group", "m", "trials", "mean_mse", "std_mse",
                 "converged_pct", "mean_iters")


def job_seed(global_seed: int, *counters: int) -> int:
    """Job-level seed derived from the global seed and integer counters."""
    return int(np.random.SeedSequence([int(global_seed), *map(int, counters)]).generate_state(1)[0])


@dataclass(frozen=True)
class BenchmarkEntry:
    name: str
    generator: Generator
    scheme: str
    group: int = 1


def benchmark(entries, problem_factory, cfg: RecoveryConfig, trials: int,
              measurements=(50,), scenarios=SCENARIOS, seed: int = 0, workers: int = 1):
    """Run every (entry, m, scenario, trial) job and aggregate a table.

    ``problem_factory(m, scenario, trial, seed)`` must return a SensingProblem.
    Trials share their problems across entries and scenarios (paired design):
    the problem seed is ``job_seed(seed, 0, m_index, trial)`` and the solver
    seed ``job_seed(seed, 1, m_index, trial)``.  Returns
    ``(rows, records)``: aggregate rows in :data:`TABLE_COLUMNS` order and the
    per-run records.  Non-converged runs count with the full iteration budget.
    """
    jobs = []
    for ei, entry in enumerate(entries):
        for mi, m in enumerate(measurements):
            for si, scen in enumerate(scenarios):
                for t in range(trials):
                    jobs.append((ei, mi, si, t))

    problems = {}
    for mi, m in enumerate(measurements):
        for si, scen in enumerate(scenarios):
            for t in range(trials):
                problems[mi, si, t] = problem_factory(m, scen, t, job_seed(seed, 0, mi, t))

    def run(job):
        ei, mi, si, t = job
        entry = entries[ei]
        jcfg = replace(cfg, seed=job_seed(seed, 1, mi, t))
        res = recover(problems[mi, si, t], entry.generator, jcfg, entry.scheme)
        return job, res

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    records = []
    cells = {}
    for (ei, mi, si, t), res in results:
        entry = entries[ei]
        rec = {"model": entry.name, "scheme": entry.scheme, "group": entry.group,
               "m": measurements[mi], "scenario": scenarios[si], "trial": t,
               "problem_seed": job_seed(seed, 0, mi, t),
               "solver_seed": job_seed(seed, 1, mi, t), **res.record()}
        records.append(rec)
        cells.setdefault((si, ei, mi), []).append(res)
    rows = []
    for (si, ei, mi) in sorted(cells):
        rs = cells[si, ei, mi]
        mses = np.array([r.mse for r in rs], dtype=float)
        rows.append({
            "scenario": scenarios[si], "model": entries[ei].name, "group": entries[ei].group,
            "m": measurements[mi], "trials": len(rs), "mean_mse": float(mses.mean()),
            "std_mse": float(mses.std()),
            "converged_pct": 100.0 * float(np.mean([r.converged for r in rs])),
            "mean_iters": float(np.mean([r.iterations for r in rs])),
        })
    return rows, records
