import numpy as np
import pytest

from equiprec import autodiff as ad
from equiprec import costmodel as C
from equiprec import model as M
from equiprec.errors import ContractError
from equiprec.geometry import AtomicConfiguration, diamond_supercell, perturb


def toy(channels=8, sh_lmax=1, **kw):
    return M.ModelConfig(channels=channels, sh_lmax=sh_lmax, correlation=kw.pop("correlation", 3),
                         radial_hidden=16, species_list=(6,), r_max=4.0, **kw)


@pytest.fixture(scope="module")
def diamond():
    return perturb(diamond_supercell(2), 0.05, seed=1)


def test_lmax0_edge_sum_is_single_scalar_path():
    cfg = M.ModelConfig(sh_lmax=0, message_lmax=0, channels=4)
    assert M.edge_paths(0, 0) == ((0, 0, 0),)
    assert C.edge_cg_sum(cfg, 0) == 1 and C.edge_cg_sum(cfg, 1) == 1


def test_edge_term_scales_with_channels_squared():
    a = C.raw_terms(toy(8), 64, 10.0)["edge_tp"]
    b = C.raw_terms(toy(16), 64, 10.0)["edge_tp"]
    assert b == 4 * a


def test_canonical_a_shape_on_diamond_n2():
    cfg = M.ModelConfig(sh_lmax=1)
    est = C.estimate_cost(cfg, {"N": 64, "d_n": 30.0})
    assert est.shapes["A"] == (64, 128, 4)
    assert est.activations["A"] == 64 * 128 * 4


def test_edge_cg_sum_hand_count():
    # layer 1 at sh_lmax=1, hidden 0e+1o: (0,0,0) 1, (0,1,1) 9, (1,0,1) 9, (1,1,0) 9
    assert C.edge_cg_sum(toy(sh_lmax=1), 1) == 28
    # layer 0 has scalar inputs only: (0,0,0) 1 and (1,0,1) 9
    assert C.edge_cg_sum(toy(sh_lmax=1), 0) == 10


def test_measure_requires_counting_mode():
    with pytest.raises(ContractError):
        C.measure_cost()
    with ad.counting():
        assert C.measure_cost().macs["edge_tp"] == 0


def test_zero_edge_graph_has_zero_edge_counters():
    cfg = toy()
    config = AtomicConfiguration([[0, 0, 0], [20.0, 0, 0]], [6, 6])
    measured, _ = C.count_forward(config, M.ModelWeights.initialize(cfg), cfg)
    assert measured.macs["sh"] == measured.macs["radial"] == measured.macs["edge_tp"] == 0


def test_counts_are_deterministic(diamond):
    cfg = toy()
    w = M.ModelWeights.initialize(cfg)
    a, _ = C.count_forward(diamond, w, cfg)
    b, _ = C.count_forward(diamond, w, cfg)
    assert a.macs == b.macs


def test_activation_counts_equal_shape_formulas(diamond):
    for cfg in (toy(4), toy(8, sh_lmax=2, correlation=2)):
        measured, stats = C.count_forward(diamond, M.ModelWeights.initialize(cfg), cfg)
        predicted = C.estimate_cost(cfg, stats)
        assert measured.activations == predicted.activations
        assert measured.shapes == predicted.shapes


def test_calibrated_estimates_within_ten_percent(diamond):
    samples = []
    for k in (4, 8, 16):
        cfg = toy(k)
        m, s = C.count_forward(diamond, M.ModelWeights.initialize(cfg), cfg)
        samples.append((cfg, s, m))
    constants = C.calibrate(samples)
    cfg = toy(12)
    measured, stats = C.count_forward(diamond, M.ModelWeights.initialize(cfg), cfg)
    est = C.estimate_cost(cfg, stats, constants)
    for block in ("edge_tp", "symmetric_contraction"):
        assert abs(measured.macs[block] / est.macs[block] - 1) < 0.10


def test_scaling_laws(diamond):
    sh = []
    for lmax in (1, 2, 3):
        cfg = toy(4, sh_lmax=lmax, correlation=1)
        m, s = C.count_forward(diamond, M.ModelWeights.initialize(cfg), cfg)
        sh.append(m.macs["sh"] / (s["N"] * s["d_n"]))
    for lmax, per_edge in zip((2, 3), sh[1:]):
        law = (lmax + 1) ** 2 / 4
        assert abs(per_edge / sh[0] / law - 1) < 0.15
    edge = []
    for k in (8, 16, 32):
        cfg = toy(k, correlation=1)
        m, _ = C.count_forward(diamond, M.ModelWeights.initialize(cfg), cfg)
        edge.append(m.macs["edge_tp"])
    for ratio, law in ((edge[1] / edge[0], 4), (edge[2] / edge[0], 16)):
        assert abs(ratio / law - 1) < 0.15
    assert np.all(np.diff(edge) > 0)
