"""Self-contained theory checks shared by the CLI and the acceptance suite."""
from __future__ import annotations

import math

import numpy as np

from .experiments import make_problem, preset_model, toy_dataset
from .groups import CyclicGroup, image_action, latent_action
from .recovery import LinearGenerator, RecoveryConfig, VAEGenerator, recover_equivariant
from .sensing import gaussian_matrix, measure, norm_condition_trial
from .theory import (
    Budget, LinearSuite, audit_bound, ball_sampler, bound_rhs, estimate_lipschitz, estimate_srec,
    linear_audit, representation_error,
)

TOY_RECOVERY = RecoveryConfig(max_iters=200, lr_z=0.05, restarts=3)


def check_norm_condition(ms=(8, 16, 32), n=64, trials=100_000, seed=0) -> dict:
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    freqs = [norm_condition_trial(x, m, n, trials, seed + i) for i, m in enumerate(ms)]
    bounds = [math.exp(-m / 4) for m in ms]
    ok = all(f <= b for f, b in zip(freqs, bounds))
    monotone = all(a >= b for a, b in zip(freqs, freqs[1:]))
    return {"passed": ok and monotone, "m": list(ms), "frequency": freqs, "bound": bounds,
            "monotone": monotone,
            "summary": ", ".join(f"m={m}: {f:.5f} <= {b:.5f}" for m, f, b in zip(ms, freqs, bounds))}


def check_srec_linear(n=64, k=4, m=12, pairs=2000, seed=0) -> dict:
    suite = LinearSuite.create(n, k, seed)
    A = gaussian_matrix(m, n, seed + 1)
    est = estimate_srec(suite.generator, A, ball_sampler(k, 3 * math.sqrt(k)), pairs, 0.0, seed)
    smin = float(np.linalg.svd(A @ suite.B, compute_uv=False).min())
    ok = est.gamma_hat >= smin - 1e-9
    return {"passed": ok, "gamma_hat": est.gamma_hat, "sigma_min": smin,
            "summary": f"gamma_hat={est.gamma_hat:.4f} >= sigma_min(AB)={smin:.4f}"}


def check_lipschitz_linear(n=64, k=4, pairs=2000, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, k))
    smax = float(np.linalg.norm(B, 2))
    L = estimate_lipschitz(LinearGenerator(B), ball_sampler(k, 1.0), pairs, seed)
    ok = L <= smax + 1e-9 and L >= 0.5 * smax
    return {"passed": ok, "L_hat": L, "sigma_max": smax,
            "summary": f"L_hat={L:.4f} <= sigma_max(B)={smax:.4f}"}


def check_linear_audit(trials=100, noise_std=0.01, delta=0.01, C=1.0, seed=0) -> dict:
    suite = LinearSuite.create(64, 4, seed)
    audits = linear_audit(suite, trials, noise_std=noise_std, delta=delta, seed=seed, C=C)
    held = sum(a.holds for a in audits)
    return {"passed": held >= math.ceil(0.95 * trials), "held": held, "trials": trials,
            "summary": f"bound held on {held}/{trials} trials"}


def check_audit_can_fail(trials=20, seed=0) -> dict:
    """With a single measurement the S-REC chain must break on some trials."""
    suite = LinearSuite.create(64, 4, seed)
    k = 4
    est_A = gaussian_matrix(1, 64, seed + 7)
    gamma = estimate_srec(suite.generator, est_A, ball_sampler(k, 6.0), 500, 0.0, seed).gamma_hat
    rng = np.random.default_rng(seed)
    violations = 0
    for t in range(trials):
        z = rng.standard_normal(k)
        prob = measure(suite.B @ z, gaussian_matrix(1, 64, rng), None, 0.0, t)
        res = recover_equivariant(prob, suite.generator,
                                  RecoveryConfig(max_iters=200, lr_z=0.2, restarts=1,
                                                 early_stop=False, seed=t))
        a = audit_bound(prob, suite.generator, res, 0.0, Budget(50, 1, 0.5, seed=t), gamma_hat=gamma)
        violations += int(not a.chain_holds)
    return {"passed": violations > 0, "violations": violations, "trials": trials,
            "summary": f"m=1 produced {violations}/{trials} chain violations"}


def check_equivariance_identity(seed=0, model=None, iters=100) -> dict:
    """rep(T_g x) with T^z-mapped starts equals rep(x) for an exact C4 prior."""
    model = model or preset_model("eq4", seed)
    G = VAEGenerator(model)
    x = toy_dataset(30, 16, seed).images[0]
    group = model.group
    reps = [representation_error(G, x, Budget(iters, 5, 0.05, "adam", seed=s)) for s in range(3)]
    noise = float(np.std(reps))
    base_starts = np.random.default_rng(seed).standard_normal((5, model.latent_dim))
    base = representation_error(G, x, Budget(iters, 5, 0.05, "adam"), z_init=base_starts)
    worst = 0.0
    for g in group:
        moved = representation_error(G, image_action(g, x), Budget(iters, 5, 0.05, "adam"),
                                     z_init=latent_action(group, g, base_starts))
        worst = max(worst, abs(moved - base))
    ok = worst <= 2 * noise + 1e-9
    return {"passed": ok, "max_difference": worst, "estimation_noise": noise,
            "summary": f"max |rep(T_g x) - rep(x)| = {worst:.2e} (2x noise = {2 * noise:.2e})"}


def toy_audits(model, trials=100, m=32, noise_std=0.01, delta=0.01, seed=0,
               cfg: RecoveryConfig = TOY_RECOVERY, budget: Budget | None = None):
    """Bound audits for an equivariant toy prior on rotated toy problems.

    Trials cycle through the test images; the representation error depends
    only on the prior and the image, so it is searched once per image.
    """
    G = VAEGenerator(model)
    images = toy_dataset().part("test")
    budget = budget or Budget.from_recovery(cfg)
    reps = {}
    audits = []
    for t in range(trials):
        s = int(np.random.SeedSequence([seed, t]).generate_state(1)[0])
        prob = make_problem(images, m, "unknown-rotation", t, s, noise_std=noise_std)
        res = recover_equivariant(prob, G, RecoveryConfig(**{**cfg.__dict__, "seed": s}))
        i = t % len(images)
        if i not in reps:
            reps[i] = representation_error(G, images[i], Budget(**{**budget.__dict__, "seed": s}))
        audits.append(audit_bound(prob, G, res, delta, rep=reps[i]))
    return audits


def check_toy_audit(model, trials=100, m=32, noise_std=0.01, delta=0.01, seed=0) -> dict:
    audits = toy_audits(model, trials, m, noise_std, delta, seed)
    held = sum(a.holds for a in audits)
    return {"passed": held >= math.ceil(0.95 * trials), "held": held, "trials": trials,
            "summary": f"toy prior bound held on {held}/{trials} trials"}


def check_rhs_invariance(model, trials=5, iters=100, seed=0) -> dict:
    """rhs terms for x* and T_g x* agree within twice the estimation noise.

    The representation-error estimates use T^z-mapped starts, so only the
    solver noise (measured across independent start sets) separates them.
    """
    G = VAEGenerator(model)
    group = model.group
    images = toy_dataset().part("test")
    worst, noise = 0.0, 0.0
    for t in range(trials):
        x = images[t]
        g = group.element(1 + t % (group.order - 1)) if group.order > 1 else group.identity
        reps = [representation_error(G, x, Budget(iters, 3, 0.05, seed=100 * t + s)) for s in range(3)]
        noise = max(noise, float(np.std(reps)))
        starts = np.random.default_rng([seed, t]).standard_normal((3, model.latent_dim))
        a = representation_error(G, x, Budget(iters, 3, 0.05), z_init=starts)
        b = representation_error(G, image_action(g, x), Budget(iters, 3, 0.05),
                                 z_init=latent_action(group, g, starts))
        worst = max(worst, abs(bound_rhs(a, 0.1, 0.0, 0.01) - bound_rhs(b, 0.1, 0.0, 0.01)))
    ok = worst <= 2 * noise + 1e-9
    return {"passed": ok, "max_difference": worst, "estimation_noise": noise,
            "summary": f"max rhs difference {worst:.2e} (2x noise = {2 * noise:.2e})"}


def run_verification(trials=100, norm_trials=100_000, pairs=2000, noise_std=0.01, delta=0.01,
                     C=1.0, seed=0, model=None, toy_trials=None) -> dict:
    """Run every theory check.

    ``model`` is the equivariant toy prior for the toy audit; without one the
    toy audit is skipped (it needs a trained checkpoint to be meaningful).
    """
    checks = {
        "norm_condition": check_norm_condition(trials=norm_trials, seed=seed),
        "srec_linear": check_srec_linear(pairs=pairs, seed=seed),
        "lipschitz_linear": check_lipschitz_linear(pairs=pairs, seed=seed),
        "linear_audit": check_linear_audit(trials, noise_std, delta, C, seed),
        "audit_can_fail": check_audit_can_fail(seed=seed),
        "equivariance_identity": check_equivariance_identity(seed),
    }
    if model is not None:
        checks["toy_audit"] = check_toy_audit(model, toy_trials or trials, seed=seed)
        checks["rhs_invariance"] = check_rhs_invariance(model, seed=seed)
    return {"passed": all(c["passed"] for c in checks.values()), "checks": checks}
