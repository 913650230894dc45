"""Predicted vs counted multiply-accumulates per block, and how they scale.

Run: python3 demos/cost_model.py
"""
from equiprec import costmodel
from equiprec import model as M
from equiprec.geometry import diamond_supercell, perturb

structure = perturb(diamond_supercell(2), 0.05, seed=1)


def cfg_for(channels, sh_lmax=1):
    return M.ModelConfig(channels=channels, sh_lmax=sh_lmax, correlation=3, radial_hidden=16,
                         species_list=(6,), r_max=4.0)


samples = []
for k in (4, 8, 16):
    cfg = cfg_for(k)
    measured, stats = costmodel.count_forward(structure, M.ModelWeights.initialize(cfg), cfg)
    samples.append((cfg, stats, measured))
constants = costmodel.calibrate(samples)
print("calibration constants (fit at lmax 1):", {b: round(c, 3) for b, c in constants.items()})
# K * N_path * (2L+1) leaves out forming the nu-fold products of A, which grows with the
# number of harmonics; a constant fitted at lmax 1 under-predicts that row at lmax 2 and 3

for k, lmax in ((12, 1), (8, 2), (8, 3)):
    cfg = cfg_for(k, lmax)
    measured, stats = costmodel.count_forward(structure, M.ModelWeights.initialize(cfg), cfg)
    est = costmodel.estimate_cost(cfg, stats, constants)
    print(f"\nK={k} lmax={lmax}  N={stats['N']}  mean neighbors {stats['d_n']:.1f}")
    for block in costmodel.BLOCKS:
        print(f"  {block:22s} predicted {est.macs[block]:12.0f}  counted {measured.macs[block]:10d}")
    print("  activations", measured.activations)
