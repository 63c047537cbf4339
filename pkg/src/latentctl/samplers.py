"""Latent samplers: probability-flow ODE, predictor-corrector reverse SDE,
and stochastic gradient Langevin dynamics.

All three walk a latent z from an initial point toward the low-energy
region defined by a composed attribute energy under a standard-normal
prior. The ODE route is deterministic; the SDE and SGLD routes are
deterministic only under a fixed seed. z may be a single vector (d,) or a
batch (n, d); batched runs update every row with row-independent noise
and step sizes, so a batch reproduces the corresponding single runs.

Time convention: ODE/SDE integrate t from schedule.T down to 0 with
negative steps. SGLD has no time variable, only an iteration count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import (
    BetaSchedule,
    DriftSpec,
    EnergyGradients,
    ode_drift_simplified,
    reverse_sde_terms,
    weighted_energy_gradient,
)

__all__ = [
    "SolverConfig",
    "SgldConfig",
    "SamplerRun",
    "SolverError",
    "solve_ode",
    "solve_pc_sde",
    "sample_sgld",
]

SOLVER_METHODS = ("euler", "rk4", "rk45_adaptive")


class SolverError(RuntimeError):
    """Integration failure; ``partial_run`` holds the state reached so far."""

    def __init__(self, message: str, partial_run: "SamplerRun | None" = None):
        super().__init__(message)
        self.partial_run = partial_run


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    fixed_steps: int = 100
    rtol: float = 1e-5
    atol: float = 1e-6
    max_steps: int = 100_000
    record_trajectory: bool = False

    def __post_init__(self):
        if self.method not in SOLVER_METHODS:
            raise ValueError(f"unknown solver method {self.method!r}; expected one of {SOLVER_METHODS}")
        if self.fixed_steps < 1:
            raise ValueError(f"fixed_steps must be >= 1, got {self.fixed_steps}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError(f"rtol/atol must be positive, got {self.rtol}/{self.atol}")


@dataclass(frozen=True)
class SgldConfig:
    step_size: float = 1e-2
    noise_scale: float = 1.0
    num_steps: int = 200
    include_prior: bool = True  # off only for bare gradient-descent checks

    def __post_init__(self):
        if self.step_size < 0 or self.noise_scale < 0 or self.num_steps < 0:
            raise ValueError("SGLD step_size, noise_scale, num_steps must be non-negative")


@dataclass
class SamplerRun:
    z_init: np.ndarray
    z_final: np.ndarray
    trajectory: list[tuple[float, np.ndarray]] | None = None
    stats: dict = field(default_factory=dict)


def _energy_value(energy: EnergyGradients | None, z: np.ndarray) -> float | None:
    """Total weighted energy if the object can report it (summed over a batch)."""
    fn = getattr(energy, "value", None)
    if fn is None:
        return None
    return float(np.sum(fn(z)))


def _check_finite(z: np.ndarray, where: str, run: SamplerRun) -> None:
    if not np.all(np.isfinite(z)):
        raise SolverError(f"non-finite state at {where}", partial_run=run)


def _rk4_step(
    f: Callable[[np.ndarray, float], np.ndarray], z: np.ndarray, t: float, t_next: float
) -> np.ndarray:
    # endpoints passed explicitly so stage times stay inside [0, T] exactly
    dt = t_next - t
    tm = 0.5 * (t + t_next)
    k1 = f(z, t)
    k2 = f(z + 0.5 * dt * k1, tm)
    k3 = f(z + 0.5 * dt * k2, tm)
    k4 = f(z + dt * k3, t_next)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def solve_ode(
    z_T: np.ndarray,
    energy: EnergyGradients | None,
    schedule: BetaSchedule = BetaSchedule(),
    solver: SolverConfig = SolverConfig(),
) -> SamplerRun:
    """Integrate dz = (1/2) beta(t) sum_i lambda_i dE_i/dz dt from t=T to 0."""
    z = np.array(z_T, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(z)):
        raise ValueError("initial state must be finite")
    spec = DriftSpec(schedule=schedule, energy=energy, form="simplified")

    def f(state: np.ndarray, t: float) -> np.ndarray:
        return ode_drift_simplified(state, t, spec)

    run = SamplerRun(z_init=z.copy(), z_final=z, stats={"steps": 0, "rejected": 0})
    run.stats["energy_start"] = _energy_value(energy, z)
    traj: list[tuple[float, np.ndarray]] | None = [] if solver.record_trajectory else None
    T = schedule.T
    if traj is not None:
        traj.append((T, z.copy()))

    if solver.method in ("euler", "rk4"):
        n = solver.fixed_steps
        # grid T*(n-i)/n hits the endpoints exactly regardless of rounding
        grid = [T * (n - i) / n for i in range(n + 1)]
        grid[0], grid[-1] = T, 0.0
        for i in range(n):
            t, t_next = grid[i], grid[i + 1]
            if solver.method == "euler":
                z = z + (t_next - t) * f(z, t)
            else:
                z = _rk4_step(f, z, t, t_next)
            run.stats["steps"] += 1
            run.z_final = z
            _check_finite(z, f"t={t_next:.6g}", run)
            if traj is not None:
                traj.append((t_next, z.copy()))
    else:
        t = T
        h = T / 100.0
        while t > 0.0:
            if run.stats["steps"] + run.stats["rejected"] >= solver.max_steps:
                run.z_final = z
                run.trajectory = traj
                raise SolverError(
                    f"adaptive solver exceeded max_steps={solver.max_steps} at t={t:.6g}",
                    partial_run=run,
                )
            h = min(h, t)
            if h < 1e-12:
                run.z_final = z
                run.trajectory = traj
                raise SolverError(f"step size underflow at t={t:.6g}", partial_run=run)
            t_next = t - h  # exact 0 when h == t
            tm = 0.5 * (t + t_next)
            # step-doubling: one step of h vs two of h/2; Richardson factor 15
            z_big = _rk4_step(f, z, t, t_next)
            z_half = _rk4_step(f, z, t, tm)
            z_two = _rk4_step(f, z_half, tm, t_next)
            err = float(np.max(np.abs(z_two - z_big))) / 15.0
            scale = solver.atol + solver.rtol * float(np.max(np.abs(z)))
            if err <= scale:
                z = z_two + (z_two - z_big) / 15.0
                t = t_next
                run.stats["steps"] += 1
                run.z_final = z
                _check_finite(z, f"t={t:.6g}", run)
                if traj is not None:
                    traj.append((t, z.copy()))
            else:
                run.stats["rejected"] += 1
            ratio = (scale / err) ** 0.2 if err > 0 else 5.0
            h = h * min(5.0, max(0.2, 0.9 * ratio))

    run.z_final = z
    run.trajectory = traj
    run.stats["energy_end"] = _energy_value(energy, z)
    return run


def solve_pc_sde(
    z_T: np.ndarray,
    energy: EnergyGradients | None,
    schedule: BetaSchedule = BetaSchedule(),
    num_steps: int = 1000,
    corrector_steps: int = 1,
    corrector_snr: float = 0.16,
    seed: int = 0,
    record_trajectory: bool = False,
    corrector_max_step: float = 0.25,
) -> SamplerRun:
    """Euler-Maruyama predictor down the reverse VP-SDE with Langevin
    corrector sweeps at each time level.

    Corrector step size follows the signal-to-noise rule per sample,
    eps = 2 (snr * sqrt(d) / ||score||)^2, with two guards: sqrt(d) (the
    expected noise norm) keeps eps independent of the draw it scales, and
    corrector_max_step caps eps because the raw rule diverges near score
    zeros. The corrector noise std is sqrt(eps (2 - eps)), the exact
    variance-preserving coefficient for the Gaussian-prior part of the
    score; it agrees with the conventional sqrt(2 eps) to first order."""
    z = np.array(z_T, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(z)):
        raise ValueError("initial state must be finite")
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    rng = np.random.default_rng(seed)
    spec = DriftSpec(schedule=schedule, energy=energy, form="general")
    single = z.ndim == 1

    def score(state: np.ndarray) -> np.ndarray:
        return -state - weighted_energy_gradient(energy, state)

    run = SamplerRun(z_init=z.copy(), z_final=z, stats={"steps": 0, "rejected": 0})
    run.stats["energy_start"] = _energy_value(energy, z)
    traj: list[tuple[float, np.ndarray]] | None = [] if record_trajectory else None
    T = schedule.T
    grid = [T * (num_steps - i) / num_steps for i in range(num_steps + 1)]
    grid[0], grid[-1] = T, 0.0
    if traj is not None:
        traj.append((T, z.copy()))

    for i in range(num_steps):
        t, t_next = grid[i], grid[i + 1]
        dt = t_next - t
        drift, diffusion = reverse_sde_terms(z, t, spec)
        xi = rng.standard_normal(z.shape)
        z = z + drift * dt + diffusion * np.sqrt(-dt) * xi
        sqrt_d = np.sqrt(z.shape[-1])
        for _ in range(corrector_steps):
            s = score(z)
            xi = rng.standard_normal(z.shape)
            if single:
                s_norm = float(np.linalg.norm(s))
                eps = corrector_max_step if s_norm == 0.0 else 2.0 * (corrector_snr * sqrt_d / s_norm) ** 2
                eps = min(eps, corrector_max_step)
            else:
                s_norm = np.linalg.norm(s, axis=-1, keepdims=True)
                with np.errstate(divide="ignore", invalid="ignore"):
                    eps = np.where(s_norm > 0, 2.0 * (corrector_snr * sqrt_d / s_norm) ** 2, np.inf)
                eps = np.minimum(eps, corrector_max_step)
            z = z + eps * s + np.sqrt(eps * (2.0 - eps)) * xi
        run.stats["steps"] += 1
        run.z_final = z
        _check_finite(z, f"t={t_next:.6g}", run)
        if traj is not None:
            traj.append((t_next, z.copy()))

    run.z_final = z
    run.trajectory = traj
    run.stats["energy_end"] = _energy_value(energy, z)
    return run


def sample_sgld(
    z_init: np.ndarray,
    energy: EnergyGradients | None,
    config: SgldConfig = SgldConfig(),
    seed: int = 0,
    record_trajectory: bool = False,
) -> SamplerRun:
    """z <- z - eta * d/dz [E(a|z) + 0.5 ||z||^2] + sqrt(2 eta) * noise_scale * xi.

    The quadratic term is the standard-normal prior's negative log density;
    ``config.include_prior=False`` drops it for bare gradient-descent tests."""
    z = np.array(z_init, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(z)):
        raise ValueError("initial state must be finite")
    rng = np.random.default_rng(seed)
    eta = config.step_size
    run = SamplerRun(z_init=z.copy(), z_final=z, stats={"steps": 0, "rejected": 0})
    run.stats["energy_start"] = _energy_value(energy, z)
    traj: list[tuple[float, np.ndarray]] | None = [] if record_trajectory else None

    for step in range(config.num_steps):
        grad = weighted_energy_gradient(energy, z)
        if config.include_prior:
            grad = grad + z
        xi = rng.standard_normal(z.shape)
        z = z - eta * grad + np.sqrt(2.0 * eta) * config.noise_scale * xi
        run.stats["steps"] += 1
        run.z_final = z
        _check_finite(z, f"step {step}", run)
        if float(np.max(np.linalg.norm(np.atleast_2d(z), axis=-1))) > 1e3:
            run.trajectory = traj
            raise SolverError(f"SGLD diverged at step {step}: ||z|| > 1e3", partial_run=run)
        if traj is not None:
            traj.append((float(step + 1), z.copy()))

    run.z_final = z
    run.trajectory = traj
    run.stats["energy_end"] = _energy_value(energy, z)
    return run
