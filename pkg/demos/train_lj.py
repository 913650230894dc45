"""Force-matching training on Lennard-Jones clusters, FP64 vs half-precision linear layers.

FP16 compute needs dynamic loss scaling; the overflow and growth events
are printed alongside the held-out RMSE.

Run: python3 demos/train_lj.py   (about a minute)
"""
from equiprec import model as M
from equiprec import train

train_set = train.synthetic_dataset(count=30, seed=100)
val_set = train.synthetic_dataset(count=20, seed=200)
test_set = train.synthetic_dataset(count=30, seed=999)
cfg = train.default_model_config(seed=0)

start = M.ModelWeights.initialize(cfg)
train.fit_scale_shift(start, train_set)
print("untrained", train.evaluate(start, cfg, test_set))

for policy in ("fp64", "default=fp32,linear=bf16,acc=fp32", "default=fp32,linear=fp16,acc=fp32"):
    weights = M.ModelWeights({k: v.copy() for k, v in start.items()})
    tcfg = train.TrainConfig(epochs=60, policy=policy)
    result = train.train(cfg, tcfg, train_set, val_set, weights=weights)
    row = train.evaluate(result.best_weights, cfg, test_set, policy)
    print(f"{policy:36s} E {row['rmse_e_mev_atom']:6.2f} meV/atom  "
          f"F {row['rmse_f_mev_a']:6.2f} meV/A  overflows {result.events.count('overflow')}  "
          f"final scale {result.final_scale:g}")
