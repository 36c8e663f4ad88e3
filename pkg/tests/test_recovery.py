import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqcs import diffmath as dm
from eqcs.groups import CyclicGroup, image_action, latent_action, rotate_bilinear
from eqcs.models import build_model
from eqcs.recovery import (
    BenchmarkEntry, Generator, LinearGenerator, RecoveryConfig, RecoveryError, TABLE_COLUMNS,
    VAEGenerator, benchmark, check_scheme, is_converged, recover_conditional, recover_coordinate,
    recover_equivariant, recover_joint,
)
from eqcs.sensing import gaussian_matrix, measure

C4 = CyclicGroup(4)


def _linear(seed=0, n=16, k=4, shape=None):
    rng = np.random.default_rng(seed)
    B, _ = np.linalg.qr(rng.normal(size=(n, k)))
    return B, LinearGenerator(B, shape)


def test_is_converged_rules():
    x = np.random.default_rng(0).normal(size=10)
    assert is_converged(x, x) == (True, 0.0)
    ok, mse = is_converged(np.zeros(100), np.full(100, 0.1))
    assert not ok and abs(mse - 0.01) < 1e-15
    unit = np.zeros(100)
    unit[3] = 1.0
    ok, mse = is_converged(np.zeros(100), unit)
    assert mse == 0.01 and not ok


def test_config_validation():
    for bad in ({"tau": 0}, {"restarts": 0}, {"radius": -1.0}, {"optimizer": "sgd"}):
        with pytest.raises(RecoveryError):
            RecoveryConfig(**bad)


def test_start_at_truth_converges_immediately():
    B, G = _linear()
    z0 = np.array([0.3, -0.2, 0.5, 0.1])
    p = measure(B @ z0, gaussian_matrix(8, 16, 1))
    r = recover_equivariant(p, G, RecoveryConfig(), z_init=z0)
    assert r.iterations == 0 and r.converged and r.final_residual < 1e-12


def test_linear_least_squares_oracle():
    B, G = _linear()
    A = gaussian_matrix(8, 16, 1)
    x = B @ np.random.default_rng(5).normal(size=4)
    p = measure(x, A)
    lr = 0.5 / np.linalg.norm(A @ B, 2) ** 2
    r = recover_equivariant(p, G, RecoveryConfig(max_iters=2000, lr_z=lr, early_stop=False))
    oracle = B @ (np.linalg.pinv(A @ B) @ p.y)
    assert np.max(np.abs(r.x_hat - oracle)) < 1e-6
    assert r.final_residual < 1e-8


def _angle_oracle(p, B, shape, grid=360):
    best = (np.inf, None)
    for th in 2 * math.pi * np.arange(grid) / grid:
        cols = np.stack([rotate_bilinear(b.reshape(shape), th).reshape(-1) for b in B.T], 1)
        M = p.A @ cols
        c = np.linalg.lstsq(M, p.y, rcond=None)[0]
        best = min(best, (float(np.linalg.norm(M @ c - p.y)), th), key=lambda t: t[0])
    return best


def test_coordinate_recovers_quarter_turn():
    B, G = _linear(shape=(4, 4))
    A = gaussian_matrix(8, 16, 1)
    x = (B @ np.random.default_rng(0).normal(size=4)).reshape(4, 4)
    p = measure(x, A, math.pi / 2)
    res_oracle, th_oracle = _angle_oracle(p, B, (4, 4))
    assert res_oracle < 1e-9
    lr = 0.5 / np.linalg.norm(A @ B, 2) ** 2
    r = recover_coordinate(p, G, RecoveryConfig(max_iters=2000, lr_z=lr, lr_angle=0.01,
                                                early_stop=False))
    d = abs((r.g_hat - th_oracle + math.pi) % (2 * math.pi) - math.pi)
    assert d < 0.05
    assert r.final_residual < 1e-6


def test_coordinate_at_least_as_reliable_as_joint():
    wins = {"coordinate": 0, "joint": 0}
    for seed in range(20):
        B, G = _linear(seed, shape=(4, 4))
        A = gaussian_matrix(10, 16, seed + 100)
        x = (B @ np.random.default_rng(seed).normal(size=4)).reshape(4, 4)
        p = measure(x, A, float(np.random.default_rng(seed + 7).uniform(0, 2 * math.pi)))
        cfg = RecoveryConfig(max_iters=150, lr_z=0.3, lr_angle=0.02, restarts=1, angle_grid=4,
                             tau=1e-4, seed=seed)
        wins["coordinate"] += recover_coordinate(p, G, cfg).converged
        wins["joint"] += recover_joint(p, G, cfg).converged
    assert wins["coordinate"] >= wins["joint"]


def test_frozen_identity_angle_reduces_to_plain_descent():
    model = build_model("conv", latent_dim=4, channels=(2, 2, 2), seed=0)
    G = VAEGenerator(model)
    x = np.random.default_rng(2).uniform(size=(16, 16))
    p = measure(x, gaussian_matrix(30, 256, 0))
    cfg = RecoveryConfig(max_iters=15, restarts=2, early_stop=False)
    a = recover_equivariant(p, G, cfg)
    b = recover_coordinate(p, G, cfg, angle_init=[0.0], freeze_angle=True)
    assert np.allclose(a.residual_trace, b.residual_trace, rtol=1e-12, atol=0)
    assert np.allclose(a.x_hat, b.x_hat, atol=1e-12)


class _FixedAngle(Generator):
    def __init__(self, inner, angle):
        self.inner, self.angle = inner, angle
        self.latent_dim, self.output_shape = inner.latent_dim, inner.output_shape

    def graph(self, z, angle=None):
        return self.inner.graph(z, z.graph.constant(np.full(z.shape[0], self.angle)))


def test_conditional_frozen_angle_reduces_to_z_descent():
    G = VAEGenerator(build_model("cond", latent_dim=4, channels=(2, 2, 2), seed=1))
    x = np.random.default_rng(3).uniform(size=(16, 16))
    p = measure(x, gaussian_matrix(30, 256, 0), 0.7)
    cfg = RecoveryConfig(max_iters=10, restarts=2, early_stop=False)
    a = recover_conditional(p, G, cfg, angle_init=[0.7], freeze_angle=True)
    b = recover_equivariant(p, _FixedAngle(G, 0.7), cfg)
    assert abs(a.g_hat - 0.7) < 1e-12
    assert np.allclose(a.residual_trace, b.residual_trace, rtol=1e-12, atol=0)


def test_conditional_loss_angle_gradient():
    G = VAEGenerator(build_model("cond", latent_dim=4, channels=(2, 2, 2), seed=1))
    A = gaussian_matrix(20, 256, 0)
    y = np.random.default_rng(0).normal(size=20)
    z = np.random.default_rng(1).normal(size=(1, 4))

    def loss(a):
        x = G.graph(a.graph.constant(z), dm.reshape(a, (1,)))
        r = dm.sub(dm.matmul(dm.reshape(x, (1, 256)), A.T), y[None])
        return dm.sum_(dm.square(r))

    assert dm.grad_check(loss, np.array(1.1)) < 1e-3


class _Fragile(Generator):
    """Linear generator that produces non-finite output when z[0] < 0."""

    def __init__(self, B):
        self.B = B
        self.latent_dim, self.output_shape = B.shape[1], (B.shape[0],)

    def graph(self, z, angle=None):
        if np.any(z.value[:, 0] < 0):
            raise dm.NonFiniteError("bad start")
        return dm.matmul(z, self.B.T)


def test_non_finite_starts_are_aborted():
    B, _ = _linear()
    p = measure(B @ np.array([1.0, 0, 0, 0]), gaussian_matrix(8, 16, 0))
    starts = np.array([[1.0, 0.1, 0, 0], [-1.0, 0, 0, 0], [0.5, 0.2, 0.1, 0]])
    r = recover_equivariant(p, _Fragile(B), RecoveryConfig(max_iters=5), z_init=starts)
    assert r.aborted_restarts >= 1
    assert np.isfinite(r.final_residual)
    with pytest.raises(RecoveryError):
        recover_equivariant(p, _Fragile(B), RecoveryConfig(max_iters=5), z_init=-np.abs(starts) - 0.1)


def test_determinism():
    G = VAEGenerator(build_model("eq", latent_dim=8, channels=(2, 2, 2), seed=2))
    x = np.random.default_rng(4).uniform(size=(16, 16))
    p = measure(x, gaussian_matrix(40, 256, 1), C4.element(1))
    cfg = RecoveryConfig(max_iters=8, seed=11)
    a, b = recover_equivariant(p, G, cfg), recover_equivariant(p, G, cfg)
    assert np.array_equal(a.x_hat, b.x_hat) and a.residual_trace == b.residual_trace


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 30), st.floats(0.05, 3.0), st.booleans())
def test_projection_and_delta_approx(iters, radius, coordinate):
    B, G = _linear(shape=(4, 4))
    x = (B @ np.array([3.0, -2.0, 1.0, 4.0])).reshape(4, 4)
    p = measure(x, gaussian_matrix(8, 16, 1), 0.4)
    cfg = RecoveryConfig(max_iters=iters, lr_z=0.5, radius=radius, early_stop=False)
    r = recover_coordinate(p, G, cfg) if coordinate else recover_equivariant(p, G, cfg)
    assert np.linalg.norm(r.z_hat) <= radius * (1 + 1e-12)
    assert r.delta_approx >= 0


def test_restart_monotonicity():
    B, G = _linear(shape=(4, 4))
    p = measure((B @ np.ones(4)).reshape(4, 4), gaussian_matrix(8, 16, 1), 1.0)
    best = []
    for R in range(1, 6):
        cfg = RecoveryConfig(max_iters=20, restarts=R, early_stop=False, seed=3)
        best.append(min(recover_coordinate(p, G, cfg).residual_trace[-1:]))
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))


def test_landscape_identity_over_closed_grid():
    model = build_model("eq", group_order=4, latent_dim=8, channels=(2, 2, 2), seed=6)
    G = VAEGenerator(model)
    base = np.random.default_rng(0).normal(size=(10, 8))
    grid = np.concatenate([latent_action(C4, g, base) for g in C4])
    out = G(grid)
    x = np.random.default_rng(1).uniform(size=(16, 16))
    d = lambda target: np.min(np.linalg.norm((out - target).reshape(len(grid), -1), axis=1))
    for g in C4:
        assert abs(d(image_action(g, x)) - d(x)) < 1e-10


def test_scheme_validation():
    cond = build_model("cond", latent_dim=4, channels=(2, 2, 2))
    conv = build_model("conv", latent_dim=4, channels=(2, 2, 2))
    with pytest.raises(RecoveryError):
        check_scheme(cond, "coordinate")
    with pytest.raises(RecoveryError):
        check_scheme(conv, "conditional")
    with pytest.raises(RecoveryError):
        check_scheme(conv, "bogus")
    check_scheme(conv, "coordinate")


def test_benchmark_table_and_reductions():
    B, G = _linear(shape=(4, 4))
    z0 = np.array([0.2, 0.1, -0.1, 0.3])
    x = (B @ z0).reshape(4, 4)

    def factory(m, scenario, trial, seed):
        return measure(x, gaussian_matrix(m, 16, seed), None)

    cfg = RecoveryConfig(max_iters=50, lr_z=0.5)
    entries = [BenchmarkEntry("lin", G, "plain")]
    rows, recs = benchmark(entries, factory, cfg, 1, (8,), scenarios=("no-rotation",))
    assert len(rows) == 1 and rows[0]["converged_pct"] == 100.0
    assert tuple(rows[0]) == TABLE_COLUMNS
    rows, recs = benchmark(entries, factory, cfg, 3, (8,))
    assert len(rows) == 2
    by = {r["scenario"]: r for r in rows}
    for key in ("mean_mse", "converged_pct", "mean_iters"):
        assert by["no-rotation"][key] == by["unknown-rotation"][key]
    again = benchmark(entries, factory, cfg, 3, (8,), workers=3)
    assert again[0] == rows and again[1] == recs


def test_non_converged_runs_count_full_budget():
    B, G = _linear()
    p = measure(B @ np.ones(4) * 5, gaussian_matrix(8, 16, 0))
    r = recover_equivariant(p, G, RecoveryConfig(max_iters=3, lr_z=1e-6))
    assert not r.converged and r.iterations == 3


def test_measurement_based_assessment():
    B, G = _linear()
    p = measure(B @ np.ones(4), gaussian_matrix(8, 16, 0))
    from dataclasses import replace
    q = replace(p, x_star=None)
    r = recover_equivariant(q, G, RecoveryConfig(max_iters=5))
    assert r.assessed_on == "measurements"
