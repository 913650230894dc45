import math

import numpy as np
import pytest

from equiprec import md
from equiprec import model as M
from equiprec.errors import ContractError, IntegrationAbort
from equiprec.geometry import AtomicConfiguration, diamond_supercell, perturb, random_cluster

TOY = M.ModelConfig(channels=4, sh_lmax=1, correlation=2, radial_hidden=8,
                    species_list=(1, 6, 8), r_max=3.0, seed=3)
ARGON = md.LennardJones({(18, 18): (0.0104, 3.40)})


@pytest.fixture(scope="module")
def toy_ff():
    return md.ModelForceField(M.ModelWeights.initialize(TOY), TOY)


def gas(n, length, seed=0, z=1):
    pos = np.random.default_rng(seed).uniform(0, length, (n, 3))
    return AtomicConfiguration(pos, [z] * n, np.eye(3) * length, (True, True, True))


def test_maxwell_boltzmann_zero_temperature():
    state = md.maxwell_boltzmann_init(random_cluster(5, (6,), seed=1), 0.0)
    assert not state.velocities.any()
    with pytest.raises(ContractError):
        md.maxwell_boltzmann_init(random_cluster(2), -1.0)


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_maxwell_boltzmann_projections(seed):
    cluster = random_cluster(6, (1, 6, 8), seed=seed)
    state = md.maxwell_boltzmann_init(cluster, 300.0, seed)
    assert np.all(np.abs(state.momentum()) < 1e-10)
    r = state.positions - np.average(state.positions, axis=0, weights=state.masses)
    ang = np.sum(state.masses[:, None] * np.cross(r, state.velocities), axis=0)
    assert np.all(np.abs(ang) < 1e-10)
    assert state.temperature() == pytest.approx(300.0, rel=1e-12)


def test_maxwell_boltzmann_component_variance():
    cfg = gas(1000, 30.0, z=8)
    state = md.maxwell_boltzmann_init(cfg, 500.0, seed=4)
    target = md.KB_EV * 500.0 / (state.masses[0] * md.MVV2E)
    var = state.velocities.var(axis=0)
    assert np.all(np.abs(var / target - 1) < 0.05)


def test_zero_forces_straight_line():
    cfg = random_cluster(3, (6,), seed=2)
    state = md.MDState.from_config(cfg, velocities=np.full((3, 3), 0.01))
    for _ in range(10):
        md.velocity_verlet_step(state, md.ZeroForceField(), 0.5)
    expected = cfg.positions.copy()
    for _ in range(10):
        expected = expected + 0.5 * 0.01
    np.testing.assert_array_equal(state.positions, expected)
    np.testing.assert_array_equal(state.velocities, np.full((3, 3), 0.01))


def oscillator(dt, periods=2.0, stiffness=1.0, amplitude=0.1):
    cfg = AtomicConfiguration([[amplitude, 0, 0]], [1])
    ff = md.HarmonicForceField(stiffness, [[0, 0, 0]])
    state = md.MDState.from_config(cfg)
    omega = math.sqrt(stiffness / (state.masses[0] * md.MVV2E))
    n = int(round(periods * 2 * math.pi / omega / dt))
    energies = []
    for _ in range(n):
        md.velocity_verlet_step(state, ff, dt)
        energies.append(state.energy + state.kinetic_energy())
    exact = amplitude * math.cos(omega * state.time)
    return np.array(energies), state.positions[0, 0] - exact, 0.5 * stiffness * amplitude ** 2


def test_harmonic_energy_bounded_and_second_order():
    energies, _, e0 = oscillator(1.0, periods=160)  # ~10^4 steps
    dev = np.abs(energies - e0) / e0
    half = len(dev) // 2
    omega_dt = math.sqrt(1.0 / (1.008 * md.MVV2E)) * 1.0
    # velocity Verlet shadow-energy envelope is (omega dt)^2 / 4
    assert dev.max() < 1.1 * omega_dt ** 2 / 4
    assert dev[half:].max() < 1.05 * dev[:half].max()
    # sample at a zero crossing, where position is first-order in phase error
    _, err1, _ = oscillator(1.0, periods=2.25)
    _, err2, _ = oscillator(0.5, periods=2.25)
    assert 3.0 < abs(err1 / err2) < 5.0


def test_time_reversal(toy_ff):
    cfg = random_cluster(5, (1, 6, 8), seed=5, box=3.5)
    state = md.maxwell_boltzmann_init(cfg, 300.0, seed=5)
    start = state.positions.copy()
    for _ in range(100):
        md.velocity_verlet_step(state, toy_ff, 0.5)
    state.velocities = -state.velocities
    for _ in range(100):
        md.velocity_verlet_step(state, toy_ff, 0.5)
    assert np.abs(state.positions - start).max() < 1e-8


def test_langevin_zero_friction_is_verlet(toy_ff):
    cfg = random_cluster(4, (6, 8), seed=6, box=3.0)
    a = md.maxwell_boltzmann_init(cfg, 200.0, seed=1)
    b = md.maxwell_boltzmann_init(cfg, 200.0, seed=1)
    for _ in range(5):
        md.velocity_verlet_step(a, toy_ff, 0.5)
        md.langevin_step(b, toy_ff, 0.5, 300.0, 0.0)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.velocities, b.velocities)


def test_free_particle_thermalizes():
    state = md.MDState.from_config(gas(64, 20.0), seed=3)
    temps = []
    for step in range(100_000):
        md.langevin_step(state, md.ZeroForceField(), 1.0, 300.0, 0.05)
        if step >= 1000 and step % 10 == 0:
            temps.append(state.temperature())
    assert np.mean(temps) == pytest.approx(300.0, rel=0.03)


def test_lj_cluster_thermostat():
    cfg = random_cluster(13, (18,), min_distance=3.6, box=9.0, seed=2)
    spec = md.MDSpec(ensemble="nvt", dt=2.0, T_target=300.0, friction=0.05, steps=20000,
                     log_every=5, seed=1)
    log = md.run_md(spec, cfg, ARGON)
    temps = log.column("T_K")[200:]
    assert np.mean(temps) == pytest.approx(300.0, rel=0.05)


def test_overdamped_limit_stops_particles():
    state = md.maxwell_boltzmann_init(gas(10, 10.0), 300.0, seed=0)
    md.langevin_step(state, md.ZeroForceField(), 1.0, 0.0, 1e3)
    assert np.abs(state.velocities).max() < 1e-12


def test_lj_forces_match_finite_differences():
    cfg = random_cluster(6, (18,), min_distance=3.2, box=7.0, seed=4)
    _, forces = ARGON.energy_forces(cfg)
    h = 1e-5
    for i in range(6):
        for d in range(3):
            plus, minus = cfg.positions.copy(), cfg.positions.copy()
            plus[i, d] += h
            minus[i, d] -= h
            fd = -(ARGON.energy(cfg.copy(positions=plus))
                   - ARGON.energy(cfg.copy(positions=minus))) / (2 * h)
            assert forces[i, d] == pytest.approx(fd, abs=1e-8)


def test_ideal_gas_pressure_is_kinetic():
    state = md.maxwell_boltzmann_init(gas(20, 10.0), 300.0, seed=2)
    p = md.numerical_pressure(state, md.ZeroForceField())
    expected = 20 * md.KB_EV * 300.0 / 1000.0 * md.EV_PER_A3_TO_BAR
    assert p == pytest.approx(expected, rel=1e-12)
    cluster = md.MDState.from_config(random_cluster(3))
    with pytest.raises(ContractError):
        md.numerical_pressure(cluster, md.ZeroForceField())


def fcc_argon(a):
    basis = np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    cells = np.array([[i, j, k] for i in range(3) for j in range(3) for k in range(3)])
    frac = (cells[:, None] + basis[None]).reshape(-1, 3)
    return AtomicConfiguration(frac * a, [18] * len(frac), np.eye(3) * 3 * a, (True,) * 3)


def test_inflated_lj_crystal_is_under_tension():
    lj = md.LennardJones({(18, 18): (0.0104, 3.40)}, r_cut=7.5)
    equilibrium = 2 ** (1 / 6) * 3.40 * math.sqrt(2)
    state = md.MDState.from_config(fcc_argon(equilibrium * 1.08))
    p4 = md.numerical_pressure(state, lj)
    assert p4 < 0
    p3 = md.numerical_pressure(state, lj, volume_step=1e-3)
    assert abs(p3 / p4 - 1) < 0.01
    compressed = md.MDState.from_config(fcc_argon(equilibrium * 0.95))
    assert md.numerical_pressure(compressed, lj) > 0


def test_barostat_scale_response():
    assert md.barostat_scale(1.013, 1.013, 100.0, 1.0) == 1.0
    scales = [md.barostat_scale(p, 1.013, 100.0, 1.0) for p in (10.0, 100.0, 1000.0)]
    assert 1.0 < scales[0] < scales[1] < scales[2]
    assert md.barostat_scale(1e9, 1.013, 100.0, 1.0) == 1.01
    assert md.barostat_scale(-1e9, 1.013, 100.0, 1.0) == 0.99
    state = md.MDState.from_config(gas(4, 8.0))
    before = state.unwrapped - state.positions
    md.barostat_step(state, 1.013, 100.0, 1.0, pressure=500.0)
    assert state.cell[0, 0] > 8.0
    lattice = (state.unwrapped - state.positions) @ np.linalg.inv(state.cell)
    np.testing.assert_allclose(lattice, np.round(lattice), atol=1e-9)
    assert np.allclose(before, 0)


def test_spec_validation():
    with pytest.raises(ContractError):
        md.MDSpec(ensemble="nph")
    with pytest.raises(ContractError):
        md.MDSpec(dt=0)
    with pytest.raises(ContractError):
        md.run_md(md.MDSpec(ensemble="npt"), random_cluster(3), md.ZeroForceField())


def test_zero_steps_logs_initial_row(toy_ff):
    log = md.run_md(md.MDSpec(steps=0), random_cluster(4, (6,), seed=1, box=3.0), toy_ff)
    assert len(log) == 1 and log.rows["step"] == [0]


def test_runs_are_bitwise_reproducible(toy_ff):
    cfg = perturb(diamond_supercell(1), 0.05, seed=2)
    spec = md.MDSpec(ensemble="nvt", dt=0.5, steps=20, log_every=5, seed=9, log_pressure=True)
    a, b = md.run_md(spec, cfg, toy_ff), md.run_md(spec, cfg, toy_ff)
    assert a.to_csv() == b.to_csv()
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


def test_nve_short_run_conserves_energy_and_momentum(toy_ff):
    cfg = perturb(diamond_supercell(1), 0.05, seed=2)
    log = md.run_md(md.MDSpec(ensemble="nve", dt=0.5, steps=200, log_every=10, seed=1),
                    cfg, toy_ff)
    etot = log.column("Etot_eV")
    assert np.abs(etot - etot[0]).max() / abs(etot[0]) < 1e-5
    state = md.maxwell_boltzmann_init(cfg, 300.0, seed=1)
    for _ in range(50):
        md.velocity_verlet_step(state, toy_ff, 0.5)
    assert np.abs(state.momentum()).max() < 1e-8


def test_periodic_run_keeps_unwrapped_on_lattice(toy_ff):
    cfg = perturb(diamond_supercell(1), 0.05, seed=3)
    state = md.maxwell_boltzmann_init(cfg, 3000.0, seed=3)
    for _ in range(30):
        md.langevin_step(state, toy_ff, 2.0, 3000.0, 0.01)
    lattice = (state.unwrapped - state.positions) @ np.linalg.inv(state.cell)
    np.testing.assert_allclose(lattice, np.round(lattice), atol=1e-9)


class Exploding(md.ForceField):
    def energy_forces(self, config):
        f = np.zeros_like(config.positions)
        f[0, 0] = np.nan if config.positions[0, 0] > 1.02 else 0.0
        return 0.0, f


def test_nonfinite_forces_abort_with_dump(tmp_path):
    cfg = AtomicConfiguration([[1.0, 0, 0], [3.0, 0, 0]], [1, 1])
    spec = md.MDSpec(ensemble="nve", dt=1.0, steps=100, init_temperature=0.0)
    state_v = 0.01

    class Pushed(Exploding):
        calls = 0

        def energy_forces(self, config):
            e, f = super().energy_forces(config)
            if Pushed.calls == 0:
                f[0, 0] = state_v * md.MVV2E * 1.008 * 2
            Pushed.calls += 1
            return e, f

    with pytest.raises(IntegrationAbort) as exc:
        md.run_md(spec, cfg, Pushed(), dump_dir=str(tmp_path))
    assert exc.value.step >= 1
    assert (tmp_path / "abort.xyz").exists()


def test_volume_step_follows_policy():
    assert md.default_volume_step(md.ZeroForceField()) == 1e-4
    w = M.ModelWeights.initialize(TOY)
    assert md.default_volume_step(md.ModelForceField(w, TOY, "fp64")) == 1e-4
    fp32 = md.default_volume_step(md.ModelForceField(w, TOY, "fp32"))
    bf16 = md.default_volume_step(md.ModelForceField(w, TOY, "default=fp32,linear=bf16,acc=fp32"))
    assert 1e-4 < fp32 < bf16 <= 1e-2


WATER = M.ModelConfig(channels=4, sh_lmax=1, correlation=2, radial_hidden=8,
                      species_list=(1, 8), r_max=3.0, seed=0)
POLICIES = ("fp64", "fp32", "default=fp32,linear=bf16,acc=fp32",
            "default=fp32,linear=fp16,acc=fp32")


def test_npt_density_plateau_across_policies():
    from equiprec.geometry import water_box
    w = M.ModelWeights.initialize(WATER)
    box = water_box(4, seed=0)
    # target the initial FP64 pressure so the plateau sits near the start density
    p0 = md.numerical_pressure(md.maxwell_boltzmann_init(box, 300.0, 1),
                               md.ModelForceField(w, WATER))
    stds = {}
    for policy in POLICIES:
        spec = md.MDSpec(ensemble="npt", dt=1.0, friction=0.05, steps=400, log_every=5, seed=1,
                         p_target=p0, pressure_coupling_time=50.0, policy=policy)
        rho = md.run_md(spec, box, md.ModelForceField(w, WATER, policy)).column("rho_gcm3")
        assert np.all(np.isfinite(rho))
        stds[policy] = rho[len(rho) // 2:].std()
    for policy in POLICIES[1:]:
        assert stds["fp64"] / 3 <= stds[policy] <= 3 * stds["fp64"]
