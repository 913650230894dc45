"""How much each float format loses, from single numbers up to whole model blocks.

Run: python3 demos/precision_tour.py
"""
import numpy as np

from equiprec import model as M
from equiprec import numerics
from equiprec.geometry import diamond_supercell, perturb

print("format  epsilon     1/3 rounded          ulp(1000)")
for name in ("fp64", "fp32", "tf32", "fp16", "bf16"):
    third = float(numerics.quantize(np.array(1 / 3), name))
    print(f"{name:6s}  {numerics.machine_epsilon(name):.3e}  {third!r:20s} "
          f"{numerics.ulp(1000.0, name):g}")

# a long dot product: the accumulator width matters as much as the operand width
rng = np.random.default_rng(0)
a, b = rng.normal(size=2000), rng.normal(size=2000)
exact = float(a @ b)
print("\ndot product of 2000 normals, error vs FP64")
for compute, acc in (("fp32", "fp32"), ("bf16", "fp32"), ("bf16", "bf16"), ("fp16", "fp32")):
    got = numerics.dot_accumulate(a, b, compute, acc)
    print(f"  multiply {compute}, accumulate {acc}: {abs(got - exact):.3e}")

# replay the captured blocks of one model evaluation under each format
cfg = M.ModelConfig(channels=8, sh_lmax=1, correlation=3, radial_hidden=16, species_list=(6,),
                    r_max=4.0, seed=0)
weights = M.ModelWeights.initialize(cfg)
records, _ = M.capture_blocks(perturb(diamond_supercell(2), 0.05, seed=0), weights, cfg)
print("\nblock replay, max |out - fp64| / max |fp64|")
print("block                      " + "  ".join(f"{f:>8s}" for f in ("fp32", "fp16", "bf16")))
for key, rec in records.items():
    ref = M.captured_output(rec)
    errs = [np.abs(M.replay_block(key, rec, weights, cfg, f) - ref).max() / np.abs(ref).max()
            for f in ("fp32", "fp16", "bf16")]
    print(f"{key:26s} " + "  ".join(f"{e:8.1e}" for e in errs))
