"""Sampler tests pinned to closed-form and Monte-Carlo oracles.

The quadratic test energy E = (lam/2) ||z - mu||^2 makes the flow ODE
linear with solution z(0) = mu + (z_T - mu) * exp(-lam * B(T) / 2), where
B is the schedule's running integral. Every deterministic tolerance here
derives from that closed form.
"""

import numpy as np
import pytest

from latentctl.diffusion import BetaSchedule, beta_at, beta_integral, reverse_sde_terms, DriftSpec
from latentctl.samplers import (
    SamplerRun,
    SgldConfig,
    SolverConfig,
    SolverError,
    sample_sgld,
    solve_ode,
    solve_pc_sde,
)


class QuadEnergy:
    """E(z) = (lam/2) ||z - mu||^2 with gradient and value reporting."""

    def __init__(self, mu, lam=1.0, name="quad"):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.lam = lam
        self.name = name

    def gradient_terms(self, z):
        return [(self.name, self.lam, z - self.mu)]

    def value(self, z):
        d = np.atleast_2d(z) - self.mu
        return 0.5 * self.lam * np.sum(d * d, axis=-1)


class LogisticEnergy1D:
    """Binary linear-classifier energy in one dimension."""

    def __init__(self, w=(1.7, -0.9), c=(0.2, -0.4), target=0):
        self.w = np.asarray(w)
        self.c = np.asarray(c)
        self.target = target

    def gradient_terms(self, z):
        f = np.multiply.outer(np.asarray(z)[..., 0], self.w) + self.c
        p = np.exp(f - f.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        g = -self.w[self.target] + (p * self.w).sum(axis=-1)
        return [("attr", 1.0, g[..., None])]


def quad_closed_form(z_T, mu, lam, schedule):
    decay = np.exp(-0.5 * lam * beta_integral(schedule, schedule.T))
    return mu + (np.asarray(z_T) - mu) * decay


SCHEDULE = BetaSchedule()


class TestOdeSolver:
    def test_empty_energy_identity_euler_rk4(self):
        z_T = np.array([0.3, -1.2, 5.0])
        for method in ("euler", "rk4"):
            run = solve_ode(z_T, None, SCHEDULE, SolverConfig(method=method))
            assert np.array_equal(run.z_final, z_T), method

    def test_rk4_matches_closed_form(self):
        rng = np.random.default_rng(2)
        mu = np.array([1.0, -2.0, 0.5, 3.0])
        energy = QuadEnergy(mu)
        for _ in range(5):
            z_T = rng.standard_normal(4) * 2
            run = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="rk4", fixed_steps=100))
            expected = quad_closed_form(z_T, mu, 1.0, SCHEDULE)
            assert np.abs(run.z_final - expected).max() < 1e-6

    def test_rk4_order_ratio(self):
        mu = np.array([1.0, -2.0])
        energy = QuadEnergy(mu)
        z_T = np.array([3.0, 4.0])
        expected = quad_closed_form(z_T, mu, 1.0, SCHEDULE)
        errs = {}
        for n in (100, 200):
            run = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="rk4", fixed_steps=n))
            errs[n] = np.abs(run.z_final - expected).max()
        ratio = errs[100] / errs[200]
        assert 8.0 <= ratio <= 32.0, ratio

    def test_euler_order_ratio(self):
        mu = np.array([1.0, -2.0])
        energy = QuadEnergy(mu)
        z_T = np.array([3.0, 4.0])
        expected = quad_closed_form(z_T, mu, 1.0, SCHEDULE)
        errs = {}
        for n in (200, 400):
            run = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="euler", fixed_steps=n))
            errs[n] = np.abs(run.z_final - expected).max()
        ratio = errs[200] / errs[400]
        assert 1.5 <= ratio <= 3.0, ratio

    def test_adaptive_matches_fine_euler_on_logistic_energy(self):
        energy = LogisticEnergy1D()
        z_T = np.array([2.5])
        fine = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="euler", fixed_steps=100_000))
        adaptive = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="rk45_adaptive"))
        assert np.abs(adaptive.z_final - fine.z_final).max() < 1e-4
        assert adaptive.stats["steps"] < 1000

    def test_adaptive_matches_closed_form_tightly(self):
        mu = np.array([0.5, -0.5])
        energy = QuadEnergy(mu, lam=2.0)
        z_T = np.array([2.0, -3.0])
        run = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="rk45_adaptive", rtol=1e-8, atol=1e-10))
        expected = quad_closed_form(z_T, mu, 2.0, SCHEDULE)
        assert np.abs(run.z_final - expected).max() < 1e-7

    def test_max_steps_exceeded_keeps_partial(self):
        energy = QuadEnergy(np.zeros(2), lam=5.0)
        cfg = SolverConfig(method="rk45_adaptive", rtol=1e-10, atol=1e-12, max_steps=5)
        with pytest.raises(SolverError, match="max_steps") as exc:
            solve_ode(np.array([4.0, 4.0]), energy, SCHEDULE, cfg)
        partial = exc.value.partial_run
        assert isinstance(partial, SamplerRun)
        assert np.all(np.isfinite(partial.z_final))

    def test_determinism_bit_stable(self):
        energy = QuadEnergy(np.array([1.0, 2.0]))
        z_T = np.array([0.1, 0.2])
        a = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="rk45_adaptive"))
        b = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="rk45_adaptive"))
        assert np.array_equal(a.z_final, b.z_final)

    def test_energy_decreases_along_solve(self):
        rng = np.random.default_rng(5)
        for energy in (QuadEnergy(np.array([1.0, -1.0]), lam=0.7),
                       QuadEnergy(np.array([0.0, 3.0]), lam=2.0)):
            for _ in range(10):
                z_T = rng.standard_normal(2) * 3
                run = solve_ode(z_T, energy, SCHEDULE, SolverConfig(method="rk4"))
                assert run.stats["energy_end"] <= run.stats["energy_start"] + 1e-12

    def test_trajectory_strictly_decreasing_t(self):
        energy = QuadEnergy(np.zeros(3))
        run = solve_ode(
            np.ones(3), energy, SCHEDULE, SolverConfig(method="rk45_adaptive", record_trajectory=True)
        )
        ts = [t for t, _ in run.trajectory]
        assert ts[0] == SCHEDULE.T
        assert ts[-1] == 0.0
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_batched_solve_matches_single(self):
        mu = np.array([1.0, -1.0])
        energy = QuadEnergy(mu)
        zs = np.random.default_rng(0).standard_normal((6, 2))
        batch = solve_ode(zs, energy, SCHEDULE, SolverConfig(method="rk4"))
        for i in range(6):
            single = solve_ode(zs[i], energy, SCHEDULE, SolverConfig(method="rk4"))
            np.testing.assert_array_equal(batch.z_final[i], single.z_final)

    def test_nonfinite_initial_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            solve_ode(np.array([np.nan]), None, SCHEDULE, SolverConfig())


class TestPcSde:
    def test_pure_predictor_matches_hand_trace(self):
        energy = QuadEnergy(np.array([0.5, -0.5]))
        z_T = np.array([1.0, 2.0])
        seed = 99
        n = 50
        run = solve_pc_sde(z_T, energy, SCHEDULE, num_steps=n, corrector_steps=0, seed=seed)

        # hand-stepped Euler-Maruyama with the identical noise stream
        rng = np.random.default_rng(seed)
        spec = DriftSpec(schedule=SCHEDULE, energy=energy, form="general")
        z = z_T.copy()
        grid = [SCHEDULE.T * (n - i) / n for i in range(n + 1)]
        grid[0], grid[-1] = SCHEDULE.T, 0.0
        for i in range(n):
            dt = grid[i + 1] - grid[i]
            drift, diffusion = reverse_sde_terms(z, grid[i], spec)
            z = z + drift * dt + diffusion * np.sqrt(-dt) * rng.standard_normal(2)
        assert np.array_equal(run.z_final, z)

    def test_seed_determinism(self):
        energy = QuadEnergy(np.zeros(3))
        z_T = np.ones(3)
        a = solve_pc_sde(z_T, energy, num_steps=40, seed=5)
        b = solve_pc_sde(z_T, energy, num_steps=40, seed=5)
        c = solve_pc_sde(z_T, energy, num_steps=40, seed=6)
        assert np.array_equal(a.z_final, b.z_final)
        assert not np.array_equal(a.z_final, c.z_final)

    def test_empty_energy_stationarity_moderate(self):
        # reduced-size version of the acceptance check: N(0, I) in, N(0, I)
        # out, at the working latent dimension
        rng = np.random.default_rng(31)
        z_T = rng.standard_normal((2000, 64))
        run = solve_pc_sde(z_T, None, SCHEDULE, num_steps=500, corrector_steps=1, seed=14)
        mean = run.z_final.mean(axis=0)
        var = run.z_final.var(axis=0)
        assert np.abs(mean).max() < 0.1
        assert np.abs(var - 1.0).max() < 0.15

    def test_mean_displacement_aligned_with_ode(self):
        # sharp energy: prior distortion ~ 1/(2*lam), so both samplers settle
        # near mu and the mean displacement directions align
        mu = np.full(2, 0.1)
        lam = 20.0
        energy = QuadEnergy(mu, lam=lam)
        z_T = np.zeros((5000, 2))
        sde = solve_pc_sde(z_T, energy, SCHEDULE, num_steps=500, corrector_steps=0, seed=3)
        ode = solve_ode(np.zeros(2), energy, SCHEDULE, SolverConfig(method="rk4"))
        disp_sde = sde.z_final.mean(axis=0)
        disp_ode = ode.z_final
        cos = disp_sde @ disp_ode / (np.linalg.norm(disp_sde) * np.linalg.norm(disp_ode))
        assert cos > 0.95
        # agreement of attractors within Monte-Carlo noise
        se = sde.z_final.std(axis=0, ddof=1) / np.sqrt(len(z_T))
        assert np.all(np.abs(disp_sde - disp_ode) < 3.0 * se + 2e-3)

    def test_num_steps_validated(self):
        with pytest.raises(ValueError, match="num_steps"):
            solve_pc_sde(np.zeros(2), None, num_steps=0)


class TestSgld:
    def test_gradient_descent_limit_converges_to_mu(self):
        mu = np.array([1.5, -0.5, 2.0])
        energy = QuadEnergy(mu)
        cfg = SgldConfig(step_size=0.1, noise_scale=0.0, num_steps=200, include_prior=False)
        run = sample_sgld(np.zeros(3), energy, cfg, seed=0)
        assert np.abs(run.z_final - mu).max() < 1e-3

    def test_zero_step_size_never_moves(self):
        z0 = np.array([0.7, -0.3])
        cfg = SgldConfig(step_size=0.0, noise_scale=1.0, num_steps=50)
        run = sample_sgld(z0, QuadEnergy(np.zeros(2)), cfg, seed=1)
        assert np.array_equal(run.z_final, z0)

    def test_standard_normal_stationarity(self):
        # empty energy, prior only: chains should sit at N(0, I)
        cfg = SgldConfig(step_size=1e-2, noise_scale=1.0, num_steps=400)
        run = sample_sgld(np.zeros((4000, 3)), None, cfg, seed=8)
        var = run.z_final.var(axis=0)
        assert np.abs(var - 1.0).max() < 0.15
        assert np.abs(run.z_final.mean(axis=0)).max() < 0.1

    def test_seed_determinism(self):
        cfg = SgldConfig(num_steps=30)
        a = sample_sgld(np.ones(3), None, cfg, seed=4)
        b = sample_sgld(np.ones(3), None, cfg, seed=4)
        assert np.array_equal(a.z_final, b.z_final)

    def test_divergence_names_step(self):
        class Repulsive:
            def gradient_terms(self, z):
                return [("boom", 1.0, -10.0 * z)]

        cfg = SgldConfig(step_size=1.0, noise_scale=0.0, num_steps=100, include_prior=False)
        with pytest.raises(SolverError, match=r"step \d+"):
            sample_sgld(np.ones(2), Repulsive(), cfg, seed=0)

    def test_negative_config_rejected(self):
        with pytest.raises(ValueError):
            SgldConfig(step_size=-1.0)
