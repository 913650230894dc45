import csv

import numpy as np
import pytest

from equiprec import md
from equiprec import model as M
from equiprec import train as T
from equiprec.errors import ContractError
from equiprec.geometry import AtomicConfiguration

CFG = T.default_model_config(seed=0)
HALF16 = "default=fp32,linear=fp16,acc=fp32"


@pytest.fixture(scope="module")
def data():
    return T.synthetic_dataset(count=12, seed=5)


def test_lj_pair_minimum_has_zero_force():
    sigma = T.LJ_PARAMS[(8, 8)][1]
    cfg = AtomicConfiguration([[0, 0, 0], [2 ** (1 / 6) * sigma, 0, 0]], [8, 8])
    energy, forces = T.lj_oracle().energy_forces(cfg)
    assert np.abs(forces).max() < 1e-14
    assert energy == pytest.approx(-T.LJ_PARAMS[(8, 8)][0], rel=1e-14)


def test_dataset_forces_match_finite_differences(data):
    oracle, h = T.lj_oracle(), 1e-5
    for s in data[:4]:
        for i in range(len(s.config)):
            for d in range(3):
                plus, minus = s.config.positions.copy(), s.config.positions.copy()
                plus[i, d] += h
                minus[i, d] -= h
                fd = -(oracle.energy(s.config.copy(positions=plus))
                       - oracle.energy(s.config.copy(positions=minus))) / (2 * h)
                assert s.forces[i, d] == pytest.approx(fd, abs=1e-8)


def test_dataset_is_deterministic_and_in_range(data):
    again = T.synthetic_dataset(count=12, seed=5)
    assert all(a.config == b.config and a.energy == b.energy for a, b in zip(data, again))
    assert all(3 <= len(s.config) <= 12 for s in data)
    assert all(set(s.config.species) <= set(T.LJ_SPECIES) for s in data)
    with pytest.raises(ContractError):
        T.synthetic_dataset(count=0)
    with pytest.raises(ContractError):
        T.synthetic_dataset("spice", 3)


def test_loss_cases():
    f = np.zeros((1, 3))
    assert T.loss([1.0], f, [1.0], f, [1], 1.0, 100.0) == 0.0
    assert T.loss([2.0], f, [1.0], f, [1], 3.5, 0.0) == 3.5


def test_loss_against_arithmetic_oracle():
    rng = np.random.default_rng(0)
    n_atoms = [2, 3]
    e_pred, e_ref = rng.normal(size=2), rng.normal(size=2)
    f_pred, f_ref = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    w_e, w_f = 1.5, 20.0
    per = []
    start = 0
    for k, n in enumerate(n_atoms):
        sq = sum((f_pred[a][c] - f_ref[a][c]) ** 2 for a in range(start, start + n)
                 for c in range(3))
        per.append(w_e * (e_pred[k] - e_ref[k]) ** 2 / n ** 2 + w_f * sq / (3 * n))
        start += n
    expected = sum(per) / 2
    assert T.loss(e_pred, f_pred, e_ref, f_ref, n_atoms, w_e, w_f) == pytest.approx(
        expected, rel=1e-14)
    from equiprec import autodiff as ad
    tape = T.loss(ad.Tensor(e_pred), ad.Tensor(f_pred), e_ref, f_ref, n_atoms, w_e, w_f)
    assert float(tape.data) == pytest.approx(expected, rel=1e-14)


def test_batched_prediction_matches_single_structures(data):
    w = M.ModelWeights.initialize(CFG)
    params = M.as_params(w)
    batch = T.make_batch(data[:3])
    e, f = T.predict(params, CFG, batch, "fp64")
    start = 0
    for k, s in enumerate(data[:3]):
        forces, energy = M.compute_forces(s.config, w, CFG, return_energy=True)
        assert e.data[k] == pytest.approx(energy, rel=1e-12)
        np.testing.assert_allclose(f.data[start:start + len(s.config)], forces, atol=1e-12)
        start += len(s.config)


def test_oracle_against_itself_and_untrained_model(data):
    zero = T.evaluate_force_field(T.lj_oracle(), data)
    assert zero == {"rmse_e_mev_atom": 0.0, "rmse_f_mev_a": 0.0, "rel_f_rmse_pct": 0.0}
    row = T.evaluate(M.ModelWeights.initialize(CFG), CFG, data)
    assert all(v > 0 for v in row.values())
    with pytest.raises(ContractError):
        T.evaluate(M.ModelWeights.initialize(CFG), CFG, [])


def test_zero_gradient_batch_grows_scale(data):
    tcfg = T.TrainConfig(w_energy=0.0, w_force=0.0, growth_interval=2, init_scale=8.0)
    state = T.init_state(M.ModelWeights.initialize(CFG), tcfg)
    before = {k: v.copy() for k, v in state.masters.items()}
    batch = T.make_batch(data[:2])
    events = [T.train_step(state, batch, CFG, tcfg)[1] for _ in range(4)]
    assert events == ["ok", "grow", "ok", "grow"]
    assert state.scale == 32.0
    assert all(np.array_equal(before[k], state.masters[k]) for k in before)


def test_scaling_is_exact_identity_at_fp64(data):
    w = M.ModelWeights.initialize(CFG)
    batch = T.make_batch(data[:4])
    runs = []
    for scaling in (True, False):
        tcfg = T.TrainConfig(dynamic_loss_scaling=scaling, momentum=0.9, growth_interval=2)
        state = T.init_state(w, tcfg)
        for _ in range(3):
            T.train_step(state, batch, CFG, tcfg)
        runs.append(state.masters)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_fp16_overflow_skips_then_recovers(data):
    tcfg = T.TrainConfig(policy=HALF16, init_scale=2.0 ** 10)
    w = M.ModelWeights.initialize(CFG)
    T.fit_scale_shift(w, data)
    state = T.init_state(w, tcfg)
    normal = T.make_batch(data[:3])
    huge = T.make_batch(data[:3])
    huge.forces = huge.forces * 1e6
    before = {k: v.copy() for k, v in state.masters.items()}
    _, event = T.train_step(state, huge, CFG, tcfg)
    assert event == "overflow" and state.scale == 2.0 ** 9
    assert all(np.array_equal(before[k], state.masters[k]) for k in before)
    _, event = T.train_step(state, normal, CFG, tcfg)
    assert event == "ok" and state.scale == 2.0 ** 9
    assert any(not np.array_equal(before[k], state.masters[k]) for k in before)
    assert all(v.dtype == np.float64 and np.array_equal(v, v.astype(np.float32))
               for v in state.masters.values())


def test_training_reduces_force_rmse_fivefold(tmp_path):
    train_set = T.synthetic_dataset(count=50, seed=1)
    val_set = T.synthetic_dataset(count=20, seed=2)
    weights = M.ModelWeights.initialize(CFG)
    T.fit_scale_shift(weights, train_set)
    initial = T.evaluate(weights, CFG, val_set)["rmse_f_mev_a"]
    res = T.train(CFG, T.TrainConfig(epochs=200, seed=0), train_set, val_set, weights=weights,
                  out_dir=str(tmp_path), eval_every=20)
    final = T.evaluate(res.best_weights, CFG, val_set)["rmse_f_mev_a"]
    assert final <= initial / 5
    assert all(b2 <= b1 for b1, b2 in zip(res.best_val_f, res.best_val_f[1:]))
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == T.RMSE_COLUMNS and len(rows) == 11
    cfg2, best = M.load_checkpoint(tmp_path / "best.npz")
    assert cfg2 == CFG
    assert T.evaluate(best, CFG, val_set)["rmse_f_mev_a"] == pytest.approx(final)
    # sanity Langevin run with the trained model: 10 fs steps, friction 0.1 1/fs
    for policy in ("fp64", "fp32", "default=fp32,linear=bf16,acc=fp32", HALF16):
        ff = md.ModelForceField(res.best_weights, CFG, policy)
        spec = md.MDSpec(ensemble="nvt", dt=10.0, T_target=300.0, friction=0.1, steps=30,
                         log_every=10, seed=1, init_temperature=1200.0)
        log = md.run_md(spec, val_set[0].config, ff)
        assert np.all(np.isfinite(log.column("Etot_eV")))


def test_train_config_validation():
    with pytest.raises(ContractError):
        T.TrainConfig(init_scale=0)
    with pytest.raises(ContractError):
        T.train(CFG, T.TrainConfig(), [])
