"""Toy mixed-precision training on Lennard-Jones-labelled clusters.

Master weights stay in FP32 (FP64 under the FP64 policy); forward and
backward run under the training policy on copies re-quantized from the
masters every step. Dynamic loss scaling guards half-precision gradients.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from . import model as mdl
from . import numerics
from .errors import ContractError, EquiprecError
from .geometry import AtomicConfiguration, random_cluster
from .md import LennardJones

# fixed oracle parameters (epsilon eV, sigma Å) per species pair
LJ_PARAMS = {(1, 1): (0.02, 1.5), (1, 8): (0.04, 1.7), (8, 8): (0.06, 2.0)}
LJ_SPECIES = (1, 8)
STRUCTURE_GAP = 100.0   # Å between batched clusters; must exceed r_max
RMSE_COLUMNS = ("epoch", "split", "rmse_e_mev_atom", "rmse_f_mev_a", "rel_f_rmse_pct")


class TrainingAbort(EquiprecError, RuntimeError):
    pass


@dataclass
class Sample:
    config: AtomicConfiguration
    energy: float
    forces: np.ndarray


@dataclass
class TrainConfig:
    lr: float = 0.02
    epochs: int = 100
    batch_size: int = 10
    w_energy: float = 1.0
    w_force: float = 100.0
    policy: str = "fp64"
    momentum: float = 0.0
    dynamic_loss_scaling: bool = True
    init_scale: float = 2.0 ** 16
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    growth_interval: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.init_scale <= 0 or self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("need init_scale > 0, lr > 0, batch_size >= 1, epochs >= 0")
        numerics.parse_policy(self.policy)

    def to_dict(self) -> dict:
        return asdict(self)


def default_model_config(seed: int = 0) -> mdl.ModelConfig:
    """Small model sized for the cluster dataset (about 4 neighbours per atom)."""
    return mdl.ModelConfig(channels=4, sh_lmax=1, correlation=2, radial_hidden=8,
                           species_list=LJ_SPECIES, r_max=4.0, neighbor_norm=4.0, seed=seed)


def lj_oracle() -> LennardJones:
    return LennardJones(LJ_PARAMS)


def synthetic_dataset(kind: str = "lj_clusters", count: int = 50, seed: int = 0,
                      min_atoms: int = 3, max_atoms: int = 12) -> list[Sample]:
    """Random clusters labelled by the fixed Lennard-Jones oracle."""
    if kind != "lj_clusters":
        raise ContractError(f"unknown dataset kind {kind!r}")
    if count < 1:
        raise ContractError("count must be >= 1")
    rng = np.random.default_rng(seed)
    oracle = lj_oracle()
    samples = []
    for _ in range(count):
        n = int(rng.integers(min_atoms, max_atoms + 1))
        n_species = int(rng.integers(1, 3))
        species = LJ_SPECIES if n_species == 2 else (int(rng.choice(LJ_SPECIES)),)
        config = random_cluster(n, species, min_distance=1.9, box=1.9 * n ** (1 / 3) + 1.5,
                                seed=int(rng.integers(2 ** 31)))
        energy, forces = oracle.energy_forces(config)
        samples.append(Sample(config, energy, forces))
    return samples


# -------------------------------------------------------------------- batching

@dataclass
class Batch:
    config: AtomicConfiguration
    structure: np.ndarray        # atom -> structure index
    n_atoms: np.ndarray
    energies: np.ndarray
    forces: np.ndarray

    def __len__(self):
        return len(self.n_atoms)


def make_batch(samples) -> Batch:
    """Disjoint union of clusters spaced far apart so no edges cross."""
    pos, species, struct = [], [], []
    for k, s in enumerate(samples):
        p = s.config.positions - s.config.positions.min(axis=0)
        pos.append(p + np.array([k * STRUCTURE_GAP, 0.0, 0.0]))
        species.append(s.config.species)
        struct.append(np.full(len(s.config), k))
    config = AtomicConfiguration(np.concatenate(pos), np.concatenate(species))
    return Batch(config, np.concatenate(struct),
                 np.array([len(s.config) for s in samples]),
                 np.array([s.energy for s in samples], dtype=np.float64),
                 np.concatenate([s.forces for s in samples]))


def loss(e_pred, f_pred, e_ref, f_ref, n_atoms, w_energy: float, w_force: float):
    """Per-structure ``w_E dE^2/N^2 + w_F |dF|^2/(3N)`` averaged over structures.

    Works on arrays or tape tensors; forces are stacked over the batch with
    `n_atoms` giving each structure's atom count.
    """
    n_atoms = np.asarray(n_atoms)
    if not isinstance(e_pred, ad.Tensor) and not isinstance(f_pred, ad.Tensor):
        e_pred, f_pred = np.asarray(e_pred, float), np.asarray(f_pred, float)
        if f_pred.shape != np.shape(f_ref) or e_pred.shape != np.shape(e_ref):
            raise ContractError("prediction and reference shapes differ")
    de = e_pred - np.asarray(e_ref, dtype=np.float64)
    df = f_pred - np.asarray(f_ref, dtype=np.float64)
    structure = np.repeat(np.arange(len(n_atoms)), n_atoms)
    if isinstance(df, ad.Tensor):
        per_struct_f = ad.reshape(ad.scatter_add(ad.sum(df * df, axis=1, keepdims=True),
                                                 structure, len(n_atoms)), (len(n_atoms),))
        total = ad.sum(de * de * (w_energy / n_atoms ** 2)
                       + per_struct_f * (w_force / (3.0 * n_atoms)))
        return total * (1.0 / len(n_atoms))
    per_struct_f = np.bincount(structure, np.sum(df * df, axis=1), minlength=len(n_atoms))
    return float(np.mean(w_energy * de ** 2 / n_atoms ** 2
                         + w_force * per_struct_f / (3.0 * n_atoms)))


def predict(params: dict, cfg: mdl.ModelConfig, batch: Batch, policy, create_graph=False):
    """Per-structure energies and stacked forces on the tape."""
    res = mdl.evaluate(batch.config, params, cfg, policy, positions_grad=True)
    per_struct = ad.reshape(ad.scatter_add(ad.reshape(res.atom_energy_tensor, (-1, 1)),
                                           batch.structure, len(batch), numerics.FP64),
                            (len(batch),))
    (g,) = ad.grad(res.energy_tensor, [res.positions], create_graph=create_graph)
    return per_struct, -g


# ------------------------------------------------------------------- optimizer

@dataclass
class TrainState:
    masters: dict
    velocity: dict
    scale: float
    clean_steps: int = 0
    step: int = 0
    events: list = field(default_factory=list)


def master_format(policy) -> numerics.FloatFormat:
    return numerics.FP64 if policy.is_fp64 else numerics.FP32


def init_state(weights, tcfg: TrainConfig) -> TrainState:
    policy = numerics.parse_policy(tcfg.policy)
    fmt = master_format(policy)
    masters = {k: np.asarray(numerics.quantize(np.asarray(v, dtype=np.float64), fmt))
               for k, v in weights.items()}
    scale = tcfg.init_scale if tcfg.dynamic_loss_scaling else 1.0
    return TrainState(masters, {k: np.zeros_like(v) for k, v in masters.items()}, scale)


def train_step(state: TrainState, batch: Batch, cfg: mdl.ModelConfig, tcfg: TrainConfig):
    """One scaled forward/backward and (unless skipped) one SGD update.

    Returns ``(loss_value, event)`` with event ``"ok"``, ``"overflow"`` or
    ``"grow"``; the state is updated in place.
    """
    policy = numerics.parse_policy(tcfg.policy)
    fmt = master_format(policy)
    compute = {k: ad.Tensor(numerics.quantize(v, policy.default_format), requires_grad=True)
               for k, v in state.masters.items()}
    names = sorted(compute)
    # half-precision overflow to inf is expected here and handled by the scaler
    with np.errstate(over="ignore", invalid="ignore"):
        e_pred, f_pred = predict(compute, cfg, batch, policy, create_graph=True)
        value = loss(e_pred, f_pred, batch.energies, batch.forces, batch.n_atoms,
                     tcfg.w_energy, tcfg.w_force)
        grads = ad.grad(value * state.scale, [compute[k] for k in names])
        unscaled = {k: numerics.quantize(g.data / state.scale, fmt)
                    for k, g in zip(names, grads)}
    state.step += 1
    if not all(np.all(np.isfinite(g)) for g in unscaled.values()):
        if tcfg.dynamic_loss_scaling:
            state.scale *= tcfg.backoff_factor
        state.clean_steps = 0
        state.events.append("overflow")
        return float(value.data), "overflow"
    for k in names:
        v = numerics.quantize(tcfg.momentum * state.velocity[k] + unscaled[k], fmt)
        state.velocity[k] = np.asarray(v)
        state.masters[k] = np.asarray(numerics.quantize(state.masters[k] - tcfg.lr * v, fmt))
        if not np.all(np.isfinite(state.masters[k])):
            raise TrainingAbort(f"master weight {k!r} became non-finite at step {state.step}")
    event = "ok"
    state.clean_steps += 1
    if tcfg.dynamic_loss_scaling and state.clean_steps >= tcfg.growth_interval:
        state.scale *= tcfg.growth_factor
        state.clean_steps = 0
        event = "grow"
    state.events.append(event)
    return float(value.data), event


# ------------------------------------------------------------------ evaluation

def evaluate(weights, cfg: mdl.ModelConfig, dataset, policy="fp64", batch_size: int = 25
             ) -> dict:
    """RMSE row: energy meV/atom, force meV/Å and relative force RMSE in percent."""
    dataset = list(dataset)
    if not dataset:
        raise ContractError("dataset is empty")
    policy = numerics.parse_policy(policy) if isinstance(policy, str) else policy
    params = mdl.as_params({k: np.asarray(v, dtype=np.float64) for k, v in weights.items()})
    pairs = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        batch = make_batch(chunk)
        e_pred, f_pred = predict(params, cfg, batch, policy)
        offsets = np.concatenate([[0], np.cumsum(batch.n_atoms)])
        for k, s in enumerate(chunk):
            pairs.append((s.energy, float(e_pred.data[k]), s.forces,
                          f_pred.data[offsets[k]:offsets[k + 1]]))
    return rmse_row(pairs)


def evaluate_force_field(force_field, dataset) -> dict:
    """RMSE row for any object with ``energy_forces(config)``."""
    dataset = list(dataset)
    if not dataset:
        raise ContractError("dataset is empty")
    pairs = []
    for s in dataset:
        e, f = force_field.energy_forces(s.config)
        pairs.append((s.energy, e, s.forces, f))
    return rmse_row(pairs)


def rmse_row(pairs) -> dict:
    f_rmse, rel = metrics.rmse_forces(pairs)
    return {"rmse_e_mev_atom": metrics.rmse_energy_per_atom(pairs), "rmse_f_mev_a": f_rmse,
            "rel_f_rmse_pct": rel}


def fit_scale_shift(weights, dataset) -> None:
    """Shift to the mean energy per atom and scale to the RMS force component."""
    weights["shift"] = np.array([np.mean([s.energy / len(s.config) for s in dataset])])
    forces = np.concatenate([s.forces.ravel() for s in dataset])
    weights["scale"] = np.array([np.sqrt(np.mean(forces ** 2))])


@dataclass
class TrainResult:
    weights: mdl.ModelWeights
    best_weights: mdl.ModelWeights
    history: list
    best_val_f: list
    events: list
    final_scale: float


def train(cfg: mdl.ModelConfig, tcfg: TrainConfig, train_set, val_set=None, weights=None,
          out_dir: str | None = None, eval_every: int = 10) -> TrainResult:
    """Mini-batch SGD over `tcfg.epochs`; validation RMSE every `eval_every` epochs.

    With `out_dir`, a checkpoint of the best validation weights and a
    ``metrics.csv`` of RMSE rows are written (atomically for the checkpoint).
    """
    train_set = list(train_set)
    if not train_set:
        raise ContractError("training set is empty")
    if weights is None:
        weights = mdl.ModelWeights.initialize(cfg)
        fit_scale_shift(weights, train_set)
    state = init_state(weights, tcfg)
    policy = numerics.parse_policy(tcfg.policy)
    rng = np.random.default_rng(tcfg.seed)
    history, best = [], []
    best_value = np.inf
    best_weights = None
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), tcfg.batch_size):
            batch = make_batch([train_set[i] for i in order[start:start + tcfg.batch_size]])
            train_step(state, batch, cfg, tcfg)
        if val_set is not None and (epoch % eval_every == 0 or epoch == tcfg.epochs):
            current = mdl.ModelWeights(state.masters)
            row = {"epoch": epoch, "split": "val", **evaluate(current, cfg, val_set, policy)}
            history.append(row)
            if row["rmse_f_mev_a"] < best_value:
                best_value = row["rmse_f_mev_a"]
                best_weights = current.copy()
                if out_dir is not None:
                    os.makedirs(out_dir, exist_ok=True)
                    mdl.save_checkpoint(os.path.join(out_dir, "best.npz"), cfg, current)
            best.append(best_value)
            if out_dir is not None:
                write_metrics_csv(os.path.join(out_dir, "metrics.csv"), history)
    final = mdl.ModelWeights({k: v.copy() for k, v in state.masters.items()})
    return TrainResult(final, best_weights if best_weights is not None else final.copy(),
                       history, best, list(state.events), state.scale)


def write_metrics_csv(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RMSE_COLUMNS)
        for row in rows:
            w.writerow([row[c] if c in ("epoch", "split") else repr(float(row[c]))
                        for c in RMSE_COLUMNS])
