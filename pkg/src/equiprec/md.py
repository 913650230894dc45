"""Molecular dynamics: velocity Verlet (NVE), BAOAB Langevin (NVT), and an
isotropic Berendsen-style barostat (NPT-lite) with observable logging.

Units: Å, fs, amu, eV, K, bar.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import numerics
from .errors import ContractError, IntegrationAbort
from .geometry import AtomicConfiguration, build_neighbor_list, write_xyz
from .metrics import TrajectoryLog

KB_EV = 8.617333262e-5                      # eV/K
MVV2E = 1.66053906660e-27 * 1e10 / 1.602176634e-19  # amu·Å²/fs² -> eV
EV_PER_A3_TO_BAR = 1.602176634e6
B_EFF_BAR = 2.2e4                           # 2.2 GPa
MAX_FORCE = 1e4                             # eV/Å, pre-NaN explosion guard
MU_CLAMP = (0.99, 1.01)
VOLUME_STEP = 1e-4


# ---------------------------------------------------------------- force fields

class ForceField:
    """Anything with ``energy(config)`` and ``energy_forces(config)``."""

    def energy(self, config: AtomicConfiguration) -> float:
        return self.energy_forces(config)[0]

    def energy_forces(self, config: AtomicConfiguration):
        raise NotImplementedError


class ZeroForceField(ForceField):
    def energy_forces(self, config):
        return 0.0, np.zeros_like(config.positions)


class HarmonicForceField(ForceField):
    """Independent isotropic springs ``0.5 * k * |r - r0|^2`` (eV/Å²)."""

    def __init__(self, stiffness: float, centers):
        self.stiffness = float(stiffness)
        self.centers = np.asarray(centers, dtype=np.float64)

    def energy_forces(self, config):
        d = config.positions - self.centers
        return 0.5 * self.stiffness * float(np.sum(d * d)), -self.stiffness * d


class LennardJones(ForceField):
    """Pairwise 12-6 potential with per-species-pair (epsilon eV, sigma Å).

    Non-periodic systems sum every pair; periodic ones need `r_cut` and use
    the neighbor list (no energy shift at the cutoff).
    """

    def __init__(self, params: dict, r_cut: float | None = None):
        self.params = {tuple(sorted(k)): v for k, v in params.items()}
        self.r_cut = r_cut

    def _pair_arrays(self, zi, zj):
        keys = np.stack([np.minimum(zi, zj), np.maximum(zi, zj)], axis=1)
        eps = np.empty(len(zi))
        sig = np.empty(len(zi))
        for k, (e, s) in self.params.items():
            sel = (keys[:, 0] == k[0]) & (keys[:, 1] == k[1])
            eps[sel], sig[sel] = e, s
        return eps, sig

    def energy_forces(self, config):
        z = config.species
        if any(config.pbc):
            if self.r_cut is None:
                raise ContractError("periodic Lennard-Jones needs r_cut")
            nl = build_neighbor_list(config, self.r_cut)
            i, j, vec, weight = nl.receivers, nl.senders, nl.vectors, 0.5
        else:
            i, j = np.triu_indices(len(config), k=1)
            vec = config.positions[j] - config.positions[i]
            if self.r_cut is not None:
                keep = np.linalg.norm(vec, axis=1) < self.r_cut
                i, j, vec = i[keep], j[keep], vec[keep]
            weight = 1.0
        eps, sig = self._pair_arrays(z[i], z[j])
        r2 = np.sum(vec * vec, axis=1)
        sr6 = (sig * sig / r2) ** 3
        energy = weight * float(np.sum(4 * eps * (sr6 * sr6 - sr6)))
        # dE/dr divided by r, applied along the i -> j vector
        coeff = weight * 24 * eps * (sr6 - 2 * sr6 * sr6) / r2
        pair = coeff[:, None] * vec
        forces = np.zeros_like(config.positions)
        np.add.at(forces, i, pair)
        np.add.at(forces, j, -pair)
        return energy, forces


class ModelForceField(ForceField):
    """The equivariant model evaluated under a precision policy."""

    def __init__(self, weights, cfg: mdl.ModelConfig, policy="fp64",
                 backend: str = "fused_batched"):
        self.cfg = cfg
        self.policy = numerics.parse_policy(policy) if isinstance(policy, str) else policy
        self.backend = mdl._check_backend(backend)
        self.params = mdl.as_params(weights)

    def energy(self, config):
        with ad.no_grad():
            return mdl.evaluate(config, self.params, self.cfg, self.policy, self.backend).energy

    def energy_forces(self, config):
        res = mdl.evaluate(config, self.params, self.cfg, self.policy, self.backend,
                           positions_grad=True)
        (g,) = ad.grad(res.energy_tensor, [res.positions])
        return res.energy, -g.data


# ---------------------------------------------------------------------- state

@dataclass
class MDState:
    positions: np.ndarray       # wrapped, Å
    unwrapped: np.ndarray       # continuous trajectory, Å
    velocities: np.ndarray      # Å/fs
    masses: np.ndarray          # amu
    species: np.ndarray
    cell: np.ndarray | None = None
    pbc: tuple = (False, False, False)
    time: float = 0.0
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    forces: np.ndarray | None = None
    energy: float | None = None

    @classmethod
    def from_config(cls, config: AtomicConfiguration, velocities=None, seed: int = 0):
        v = np.zeros_like(config.positions) if velocities is None else np.array(velocities, float)
        state = cls(config.positions.copy(), config.positions.copy(), v, config.masses,
                    config.species.copy(), None if config.cell is None else config.cell.copy(),
                    config.pbc, rng=np.random.default_rng(seed))
        state.rewrap()
        return state

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    def config(self) -> AtomicConfiguration:
        return AtomicConfiguration(self.positions, self.species, self.cell, self.pbc)

    def rewrap(self):
        if any(self.pbc):
            self.positions = self.config().wrapped().positions

    def kinetic_energy(self) -> float:
        return 0.5 * MVV2E * float(np.sum(self.masses[:, None] * self.velocities ** 2))

    def temperature(self) -> float:
        return 2.0 * self.kinetic_energy() / (3 * self.n_atoms * KB_EV)

    def momentum(self) -> np.ndarray:
        return (self.masses[:, None] * self.velocities).sum(axis=0)

    def volume(self) -> float:
        if self.cell is None:
            raise ContractError("state has no cell")
        return float(abs(np.linalg.det(self.cell)))

    def density(self) -> float:
        return self.config().density


def _zero_momentum(v, masses):
    return v - (masses[:, None] * v).sum(axis=0) / masses.sum()


def _zero_rotation(v, pos, masses):
    r = pos - (masses[:, None] * pos).sum(axis=0) / masses.sum()
    ang = np.sum(masses[:, None] * np.cross(r, v), axis=0)
    r2 = np.einsum("nk,nk->n", r, r)
    inertia = np.einsum("n,nij->ij", masses,
                        r2[:, None, None] * np.eye(3) - r[:, :, None] * r[:, None, :])
    omega = np.linalg.lstsq(inertia, ang, rcond=None)[0]
    return v - np.cross(omega, r)


def maxwell_boltzmann_init(config: AtomicConfiguration, temperature: float, seed: int = 0
                           ) -> MDState:
    """Thermal velocities with net momentum (and rotation, if non-periodic) removed.

    Velocities are rescaled after the projections so the kinetic temperature
    equals `temperature` exactly.
    """
    if temperature < 0:
        raise ContractError("temperature must be >= 0")
    rng = np.random.default_rng(seed)
    masses = config.masses
    sigma = np.sqrt(KB_EV * temperature / (masses * MVV2E))
    v = rng.standard_normal(config.positions.shape) * sigma[:, None]
    v = _zero_momentum(v, masses)
    if not any(config.pbc) and len(config) > 2:
        v = _zero_rotation(v, config.positions, masses)
        v = _zero_momentum(v, masses)
    state = MDState.from_config(config, v, seed)
    current = state.temperature()
    if temperature > 0 and current > 0:
        state.velocities *= np.sqrt(temperature / current)
    else:
        state.velocities[:] = 0.0
    return state


# ------------------------------------------------------------------ integrators

def _refresh_forces(state: MDState, model: ForceField):
    energy, forces = model.energy_forces(state.config())
    peak = float(np.max(np.abs(forces))) if forces.size else 0.0
    if not np.all(np.isfinite(forces)) or not np.isfinite(energy) or peak > MAX_FORCE:
        raise IntegrationAbort(f"unstable forces at step {state.step}: max |F| = {peak:.3g} eV/Å",
                               step=state.step, max_force=peak)
    state.energy, state.forces = float(energy), forces


def _kick(state: MDState, dt: float):
    state.velocities = state.velocities + dt * state.forces / (state.masses[:, None] * MVV2E)


def _drift(state: MDState, dt: float):
    disp = dt * state.velocities
    state.positions = state.positions + disp
    state.unwrapped = state.unwrapped + disp


def velocity_verlet_step(state: MDState, model: ForceField, dt: float) -> MDState:
    """Kick-drift-kick with forces cached on the state between steps."""
    if state.forces is None:
        _refresh_forces(state, model)
    _kick(state, 0.5 * dt)
    _drift(state, dt)
    state.rewrap()
    _refresh_forces(state, model)
    _kick(state, 0.5 * dt)
    state.time += dt
    state.step += 1
    return state


def langevin_step(state: MDState, model: ForceField, dt: float, temperature: float,
                  friction: float, rng: np.random.Generator | None = None) -> MDState:
    """BAOAB splitting; `friction` in 1/fs. Zero friction is velocity Verlet."""
    if friction < 0:
        raise ContractError("friction must be >= 0")
    if friction == 0:
        return velocity_verlet_step(state, model, dt)
    rng = state.rng if rng is None else rng
    if state.forces is None:
        _refresh_forces(state, model)
    _kick(state, 0.5 * dt)
    _drift(state, 0.5 * dt)
    c1 = np.exp(-friction * dt)
    thermal = np.sqrt(KB_EV * temperature / (state.masses * MVV2E))
    noise = rng.standard_normal(state.velocities.shape)
    state.velocities = (c1 * state.velocities
                        + np.sqrt(1 - c1 * c1) * thermal[:, None] * noise)
    _drift(state, 0.5 * dt)
    state.rewrap()
    _refresh_forces(state, model)
    _kick(state, 0.5 * dt)
    state.time += dt
    state.step += 1
    return state


def _scaled_config(state: MDState, factor: float) -> AtomicConfiguration:
    return AtomicConfiguration(state.positions * factor, state.species, state.cell * factor,
                               state.pbc)


def default_volume_step(model: ForceField) -> float:
    """1e-4 at FP64; sqrt(eps) clipped to [1e-4, 1e-2] for reduced policies.

    Rounded energies are step functions of the volume, so a tiny step turns
    the central difference into rounding noise.
    """
    policy = getattr(model, "policy", None)
    if policy is None or policy.is_fp64:
        return VOLUME_STEP
    return float(np.clip(np.sqrt(policy.epsilon), VOLUME_STEP, 1e-2))


def numerical_pressure(state: MDState, model: ForceField, volume_step: float | None = None
                       ) -> float:
    """Pressure in bar: central-difference ``-dE/dV`` under isotropic scaling
    at fixed fractional coordinates, plus the kinetic term ``N kB T / V``."""
    if state.cell is None or not all(state.pbc):
        raise ContractError("pressure needs a fully periodic cell")
    if volume_step is None:
        volume_step = default_volume_step(model)
    vol = state.volume()
    up, down = (1 + volume_step) ** (1 / 3), (1 - volume_step) ** (1 / 3)
    de = model.energy(_scaled_config(state, up)) - model.energy(_scaled_config(state, down))
    virial = -de / (2 * volume_step * vol)
    kinetic = 2.0 * state.kinetic_energy() / (3.0 * vol)
    return (virial + kinetic) * EV_PER_A3_TO_BAR


def barostat_scale(pressure: float, p_target: float, coupling_time: float, dt: float) -> float:
    mu = np.cbrt(1 - (dt / coupling_time) * (p_target - pressure) / B_EFF_BAR)
    return float(np.clip(mu, *MU_CLAMP))


def barostat_step(state: MDState, p_target: float, coupling_time: float, dt: float,
                  pressure: float) -> MDState:
    """Isotropic rescale of cell and coordinates toward `p_target` (bar)."""
    if state.cell is None or not all(state.pbc):
        raise ContractError("barostat needs a fully periodic cell")
    mu = barostat_scale(pressure, p_target, coupling_time, dt)
    if mu != 1.0:
        # scaling both copies keeps unwrapped - wrapped on the lattice
        state.positions = state.positions * mu
        state.unwrapped = state.unwrapped * mu
        state.cell = state.cell * mu
        state.forces = None
    return state


# ------------------------------------------------------------------------ runner

@dataclass
class MDSpec:
    ensemble: str = "nvt"
    dt: float = 1.0
    T_target: float = 300.0
    friction: float = 0.01
    p_target: float = 1.013
    pressure_coupling_time: float = 1000.0
    steps: int = 1000
    log_every: int = 10
    seed: int = 0
    policy: str = "fp64"
    backend: str = "fused_batched"
    frame_every: int = 0
    init_temperature: float | None = None
    log_pressure: bool = False

    def __post_init__(self):
        if self.ensemble not in ("nve", "nvt", "npt"):
            raise ContractError(f"unknown ensemble {self.ensemble!r}")
        if self.dt <= 0 or self.friction < 0 or self.steps < 0 or self.log_every < 1:
            raise ContractError("need dt > 0, friction >= 0, steps >= 0, log_every >= 1")
        numerics.parse_policy(self.policy)


def _log_row(log: TrajectoryLog, state: MDState, model, spec: MDSpec, origin, com0):
    periodic = state.cell is not None and all(state.pbc)
    if periodic and (spec.ensemble == "npt" or spec.log_pressure):
        pressure = numerical_pressure(state, model)
    else:
        pressure = float("nan")
    disp = state.unwrapped - origin
    com = (state.masses[:, None] * state.unwrapped).sum(axis=0) / state.masses.sum()
    kinetic = state.kinetic_energy()
    log.append(step=state.step, time_fs=state.time, T_K=state.temperature(),
               rho_gcm3=state.density() if periodic else float("nan"), p_bar=pressure,
               Epot_eV=state.energy, msd_A2=float(np.mean(np.sum(disp * disp, axis=1))),
               drift_A=float(np.linalg.norm(com - com0)),
               Etot_eV=state.energy + kinetic, volume_A3=state.volume() if periodic else 0.0)


def run_md(spec: MDSpec, config: AtomicConfiguration, model: ForceField,
           dump_dir: str | None = None) -> TrajectoryLog:
    """Integrate `spec.steps` steps and log observables every `log_every` steps.

    On an integration abort the last state is written to ``abort.xyz`` in
    `dump_dir` (when given) before the error propagates.
    """
    if spec.ensemble == "npt" and (config.cell is None or not all(config.pbc)):
        raise ContractError("npt requires a fully periodic configuration")
    t0 = spec.T_target if spec.init_temperature is None else spec.init_temperature
    state = maxwell_boltzmann_init(config, t0, spec.seed)
    state.rng = np.random.default_rng([spec.seed, 1])
    log = TrajectoryLog(species=state.species.copy(), masses=state.masses.copy())
    origin = state.unwrapped.copy()
    com0 = (state.masses[:, None] * origin).sum(axis=0) / state.masses.sum()
    frame_every = spec.frame_every or spec.log_every
    try:
        _refresh_forces(state, model)
        _log_row(log, state, model, spec, origin, com0)
        _save_frame(log, state)
        for _ in range(spec.steps):
            if spec.ensemble == "nve":
                velocity_verlet_step(state, model, spec.dt)
            else:
                langevin_step(state, model, spec.dt, spec.T_target, spec.friction)
            if spec.ensemble == "npt":
                barostat_step(state, spec.p_target, spec.pressure_coupling_time, spec.dt,
                              numerical_pressure(state, model))
                if state.forces is None:
                    _refresh_forces(state, model)
            if state.step % spec.log_every == 0:
                _log_row(log, state, model, spec, origin, com0)
            if state.step % frame_every == 0:
                _save_frame(log, state)
    except IntegrationAbort:
        if dump_dir is not None:
            os.makedirs(dump_dir, exist_ok=True)
            with open(os.path.join(dump_dir, "abort.xyz"), "w", encoding="utf-8") as fh:
                fh.write(write_xyz([state.config()]))
        raise
    return log


def _save_frame(log: TrajectoryLog, state: MDState):
    log.frames.append(state.unwrapped.copy())
    log.frame_steps.append(state.step)
    log.cells.append(None if state.cell is None else state.cell.copy())
