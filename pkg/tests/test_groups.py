import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqcs import diffmath as dm
from eqcs.groups import (
    CyclicGroup, GroupElement, GroupError, angle_of, compose, field_action, image_action,
    latent_action, latent_rep, regular_rep, rotate_bilinear, rotate_image,
)


def bump(size=16, sigma=5.0, center=(6.0, 9.0)):
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return np.exp(-((ii - center[0]) ** 2 + (jj - center[1]) ** 2) / (2 * sigma**2))


def test_compose_examples():
    c4, c16 = CyclicGroup(4), CyclicGroup(16)
    assert compose(c4.element(1), c4.element(3)) == c4.identity
    assert compose(c4.element(2), c4.element(2)) == c4.identity
    assert compose(c16.element(5), c16.element(7)) == c16.element(12)
    with pytest.raises(GroupError):
        compose(c4.element(1), c16.element(1))


def test_group_axioms():
    for n in (1, 4, 8, 16):
        group = CyclicGroup(n)
        for g in group:
            assert g * g.inverse == group.identity
            assert g * group.identity == g
    with pytest.raises(GroupError):
        GroupElement(4, 4)


def test_angle_of():
    assert angle_of(CyclicGroup(4).element(1)) == math.pi / 2
    assert angle_of(CyclicGroup(16).element(0)) == 0.0
    assert angle_of(CyclicGroup(8).element(4)) == math.pi


def test_regular_rep_examples():
    c4 = CyclicGroup(4)
    assert np.array_equal(regular_rep(c4, c4.identity), np.eye(4))
    assert np.array_equal(regular_rep(c4, c4.element(1)) @ np.array([1.0, 2, 3, 4]), [4.0, 1, 2, 3])


@pytest.mark.parametrize("n", [4, 8, 16])
def test_homomorphism_and_unitarity_exhaustive(n):
    group = CyclicGroup(n)
    for g in group:
        P = regular_rep(group, g)
        assert np.array_equal(P @ P.T, np.eye(n))
        T = latent_rep(group, g, 3)
        assert np.array_equal(T @ T.T, np.eye(3 * n))
        for h in group:
            assert np.array_equal(regular_rep(group, g * h), P @ regular_rep(group, h))
            assert np.array_equal(latent_rep(group, g * h, 3), T @ latent_rep(group, h, 3))


def test_latent_rep_examples():
    c4, c16 = CyclicGroup(4), CyclicGroup(16)
    assert np.array_equal(latent_rep(c4, c4.identity, 32), np.eye(128))
    T = latent_rep(c4, c4.element(2), 1)
    assert np.array_equal(T @ T, np.eye(4))
    worst = max(np.abs(latent_rep(c16, g, 8).T @ latent_rep(c16, g, 8) - np.eye(128)).max()
                for g in c16)
    assert worst == 0.0


def test_latent_action_matches_matrix(rng):
    group = CyclicGroup(8)
    z = rng.normal(size=24)
    for g in group:
        assert np.array_equal(latent_action(group, g, z), latent_rep(group, g, 3) @ z)
    with pytest.raises(GroupError):
        latent_action(group, group.element(1), np.ones(10))


def test_rotate_hand_case_both_modes():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    expected = [[2.0, 4.0], [1.0, 3.0]]
    assert np.array_equal(rotate_image(img, math.pi / 2, mode="exact-quarter"), expected)
    assert np.allclose(rotate_image(img, math.pi / 2, mode="bilinear"), expected, atol=1e-12)


def test_rotate_by_zero_is_identity(rng):
    img = rng.normal(size=(7, 7))
    assert np.array_equal(rotate_image(img, 0.0, mode="exact-quarter"), img)
    assert np.array_equal(rotate_image(img, 0.0, mode="bilinear"), img)


def test_exact_mode_errors():
    with pytest.raises(GroupError):
        rotate_image(np.ones((3, 4)), math.pi / 2, mode="exact-quarter")
    with pytest.raises(GroupError):
        rotate_image(np.ones((4, 4)), 0.3, mode="exact-quarter")


def test_four_quarter_turns_bit_exact(rng):
    img = rng.normal(size=(9, 9))
    g1 = CyclicGroup(4).element(1)
    out = img
    for _ in range(4):
        out = image_action(g1, out)
    assert np.array_equal(out, img)


@pytest.mark.parametrize("q", range(4))
def test_bilinear_agrees_with_exact_at_quarter_angles(rng, q):
    img = rng.normal(size=(8, 8))
    a = rotate_image(img, q * math.pi / 2, mode="bilinear")
    b = rotate_image(img, q * math.pi / 2, mode="exact-quarter")
    assert np.abs(a - b).max() < 1e-6


@pytest.mark.parametrize("n", [8, 16])
def test_bilinear_round_trip_on_smooth_bump(n):
    img = bump()
    group = CyclicGroup(n)
    worst = 0.0
    for g in group:
        back = rotate_bilinear(rotate_bilinear(img, angle_of(g)), angle_of(g.inverse))
        worst = max(worst, np.abs(back - img)[3:13, 3:13].max())
    assert worst < 0.02


def test_angle_gradient_matches_finite_differences():
    img = bump(sigma=3.0)
    W = np.random.default_rng(0).normal(size=img.shape)
    for theta in (0.3, 1.1, 2.0):
        err = dm.grad_check(lambda t: dm.sum_(dm.mul(rotate_bilinear(img, t), W)), np.array(theta))
        assert err < 1e-3


def test_image_gradient_is_adjoint(rng):
    W = rng.normal(size=(6, 6))
    err = dm.grad_check(lambda x: dm.sum_(dm.mul(rotate_bilinear(x, 0.7), W)), rng.normal(size=(6, 6)))
    assert err < 1e-6


def test_batched_angles(rng):
    imgs = rng.normal(size=(3, 8, 8))
    th = np.array([0.0, 0.4, 1.3])
    out = rotate_bilinear(imgs, th)
    for b in range(3):
        assert np.array_equal(out[b], rotate_bilinear(imgs[b], th[b]))


def test_field_action_is_a_group_action(rng):
    group = CyclicGroup(4)
    f = rng.normal(size=(2, 3, 4, 6, 6))
    for g in group:
        for h in group:
            assert np.array_equal(field_action(g, field_action(h, f)), field_action(g * h, f))


def test_bilinear_keeps_unit_interval(rng):
    img = rng.uniform(size=(12, 12))
    for theta in rng.uniform(0, 2 * np.pi, size=5):
        out = rotate_bilinear(img, theta)
        assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([4, 8, 16]), st.integers(0, 15), st.integers(0, 15))
def test_representation_homomorphism_property(n, a, b):
    group = CyclicGroup(n)
    g, h = group.element(a), group.element(b)
    assert np.array_equal(latent_rep(group, g * h, 2), latent_rep(group, g, 2) @ latent_rep(group, h, 2))
    assert np.array_equal(regular_rep(group, g * h), regular_rep(group, g) @ regular_rep(group, h))
