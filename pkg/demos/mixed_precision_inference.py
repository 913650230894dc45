"""Energy and force drift of mixed-precision inference on a diamond supercell.

The model shift is set so the total energy has a realistic magnitude for
carbon; only then does a relative energy error mean something.

Run: python3 demos/mixed_precision_inference.py
"""
import numpy as np

from equiprec import bench, numerics
from equiprec import model as M
from equiprec.cli import COMPARE_COLUMNS, compare_rows

cfg = M.ModelConfig(channels=8, sh_lmax=1, correlation=3, radial_hidden=16, species_list=(6,),
                    r_max=4.0, seed=0, shift=-257.672)
weights = M.ModelWeights.initialize(cfg)
policies = ["fp64", "fp32", "default=fp32,linear=fp16,acc=fp32",
            "default=fp32,linear=bf16,acc=fp32"]
system = {"kind": "diamond", "supercell": 2, "perturb": 0.05, "seed": 1}

reports = []
for policy in policies:
    spec = bench.BenchmarkSpec(cfg=cfg, warmup_iters=3, timed_iters=10, policy=policy,
                               system=system, forces=True)
    reports.append(bench.run_inference_bench(spec, weights))

rows = compare_rows(reports, policies, "fused_batched")
keep = [c for c in COMPARE_COLUMNS if c not in ("backend", "energy_std_eV", "force_std_eV_A")]
print("  ".join(f"{c:>14s}" for c in keep))
for row in rows:
    row["policy"] = numerics.parse_policy(row["policy"]).label
    print("  ".join(f"{row[c]:>14.6g}" if isinstance(row[c], (float, np.floating))
                    else f"{row[c]:>14s}" for c in keep))
print("\nEmulated formats run slower than FP64 here; the timings show the cost of emulation,"
      "\nnot of hardware half precision. The energy and force columns are what transfer.")
