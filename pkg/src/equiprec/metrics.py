"""Precision-loss metrics against an FP64 baseline and trajectory observables.

Energies are eV, forces eV/Å, distances Å, time fs. RMSE helpers report
meV/atom and meV/Å.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .geometry import AMU_PER_A3_TO_G_PER_CM3, AtomicConfiguration, build_neighbor_list

EPS_STAB = 1e-12
LOG_COLUMNS = ("step", "time_fs", "T_K", "rho_gcm3", "p_bar", "Epot_eV", "msd_A2", "drift_A")


def energy_errors(e_ref: float, e_test: float, n_atoms: int) -> tuple[float, float]:
    """Per-atom absolute energy error and relative energy error."""
    if n_atoms < 1:
        raise ContractError("n_atoms must be >= 1")
    diff = abs(float(e_test) - float(e_ref))
    return diff / n_atoms, diff / (abs(float(e_ref)) + EPS_STAB)


def _scaled_norm(x, axis=None):
    # rescale first so squares of tiny differences cannot underflow to zero
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak == 0.0 or not np.isfinite(peak):
        return np.linalg.norm(x, axis=axis)
    return np.linalg.norm(x / peak, axis=axis) * peak


def force_errors(f_ref, f_test) -> tuple[float, float]:
    """Mean per-atom Euclidean force error and the Frobenius-norm ratio."""
    f_ref = np.asarray(f_ref, dtype=np.float64)
    f_test = np.asarray(f_test, dtype=np.float64)
    if f_ref.shape != f_test.shape or f_ref.ndim != 2 or f_ref.shape[1] != 3:
        raise DimensionError(f"force arrays must share an (N, 3) shape, got "
                             f"{f_ref.shape} and {f_test.shape}")
    diff = f_test - f_ref
    ae = float(_scaled_norm(diff, axis=1).mean())
    rae = float(_scaled_norm(diff) / (_scaled_norm(f_ref) + EPS_STAB))
    return ae, rae


@dataclass
class ErrorReport:
    ae_e: np.ndarray
    rae_e: np.ndarray
    ae_f: np.ndarray
    rae_f: np.ndarray
    n_atoms: np.ndarray

    @property
    def count(self) -> int:
        return int(self.ae_e.size)

    def summary(self) -> dict:
        out = {"count": self.count, "atoms": int(self.n_atoms.sum())}
        for name in ("ae_e", "rae_e", "ae_f", "rae_f"):
            values = getattr(self, name)
            out[f"{name}_mean"] = float(values.mean())
            out[f"{name}_median"] = float(np.median(values))
            out[f"{name}_p95"] = float(np.percentile(values, 95))
        return out


def _unpack(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ContractError("dataset is empty")
    return pairs


def error_report(pairs) -> ErrorReport:
    """Per-structure errors for ``(E_ref, E_test, F_ref, F_test)`` tuples."""
    rows = []
    for e_ref, e_test, f_ref, f_test in _unpack(pairs):
        n = np.asarray(f_ref).shape[0]
        rows.append((*energy_errors(e_ref, e_test, n), *force_errors(f_ref, f_test), n))
    cols = np.array(rows, dtype=np.float64).T
    return ErrorReport(cols[0], cols[1], cols[2], cols[3], cols[4].astype(np.int64))


def rmse_energy_per_atom(pairs) -> float:
    """RMS over structures of the per-atom energy error, meV/atom."""
    errs = [(float(e_test) - float(e_ref)) / np.asarray(f_ref).shape[0]
            for e_ref, e_test, f_ref, _ in _unpack(pairs)]
    return float(np.sqrt(np.mean(np.square(errs))) * 1e3)


def rmse_forces(pairs) -> tuple[float, float]:
    """Force-component RMSE in meV/Å and relative to the reference RMS, in percent."""
    pairs = _unpack(pairs)
    ref = np.concatenate([np.asarray(p[2], dtype=np.float64).ravel() for p in pairs])
    test = np.concatenate([np.asarray(p[3], dtype=np.float64).ravel() for p in pairs])
    if ref.shape != test.shape:
        raise DimensionError("reference and test forces differ in size")
    rmse = float(np.sqrt(np.mean((test - ref) ** 2)))
    ref_rms = float(np.sqrt(np.mean(ref ** 2)))
    return rmse * 1e3, rmse / (ref_rms + EPS_STAB) * 100.0


def density_gcm3(total_mass_amu: float, volume_a3: float) -> float:
    return float(total_mass_amu) / float(volume_a3) * AMU_PER_A3_TO_G_PER_CM3


# ------------------------------------------------------------------ trajectories

@dataclass
class TrajectoryLog:
    """Logged observables (one row per log step) plus saved frames.

    `frames` hold unwrapped positions; `extras` carries optional per-row
    series such as total energy that are outside the CSV schema.
    """
    rows: dict = field(default_factory=lambda: {c: [] for c in LOG_COLUMNS})
    frames: list = field(default_factory=list)
    frame_steps: list = field(default_factory=list)
    cells: list = field(default_factory=list)
    species: np.ndarray | None = None
    masses: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def append(self, **values):
        for c in LOG_COLUMNS:
            self.rows[c].append(values.pop(c))
        for k, v in values.items():
            self.extras.setdefault(k, []).append(v)

    def column(self, name) -> np.ndarray:
        if name in self.rows:
            return np.asarray(self.rows[name], dtype=np.float64)
        return np.asarray(self.extras[name], dtype=np.float64)

    def __len__(self):
        return len(self.rows["step"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for i in range(len(self)):
            w.writerow([int(self.rows["step"][i])]
                       + [repr(float(self.rows[c][i])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrajectoryLog":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != LOG_COLUMNS:
            raise ContractError(f"unexpected log header {header}")
        log = cls()
        for row in reader:
            log.append(step=int(row[0]), **{c: float(v) for c, v in zip(LOG_COLUMNS[1:], row[1:])})
        return log


def _stats(values) -> dict:
    values = np.asarray(values, dtype=np.float64)
    return {"mean": float(values.mean()), "std": float(values.std())}


def trajectory_observables(log: TrajectoryLog, targets: dict | None = None) -> dict:
    """Mean and std of T, density, pressure and potential energy, with target offsets.

    `targets` may name ``T_K``, ``p_bar`` and ``rho_gcm3``.
    """
    if len(log) == 0:
        raise ContractError("trajectory log is empty")
    targets = targets or {}
    out = {c: _stats(log.column(c)) for c in ("T_K", "rho_gcm3", "p_bar", "Epot_eV")}
    if "T_K" in targets:
        out["T_bias_K"] = out["T_K"]["mean"] - targets["T_K"]
    if "p_bar" in targets:
        out["delta_p_bar"] = out["p_bar"]["mean"] - targets["p_bar"]
    if "rho_gcm3" in targets:
        dev = np.abs(log.column("rho_gcm3") - targets["rho_gcm3"])
        out["rho_dev_p95"] = float(np.percentile(dev, 95))
    return out


def _frames_array(frames) -> np.ndarray:
    shapes = {np.shape(f) for f in frames}
    if len(shapes) != 1:
        raise ContractError(f"atom count changes across frames: {sorted(shapes)}")
    return np.asarray(frames, dtype=np.float64)


def msd(frames, reference: int = 0) -> np.ndarray:
    """Mean-squared displacement (Å²) of unwrapped positions from frame `reference`."""
    if len(frames) < 2:
        raise ContractError("msd needs at least two frames")
    pos = _frames_array(frames)
    return np.mean(np.sum((pos - pos[reference]) ** 2, axis=-1), axis=-1)


def com_drift(frames, masses) -> np.ndarray:
    """Distance (Å) of the mass-weighted centre from its initial position."""
    pos = _frames_array(frames)
    masses = np.asarray(masses, dtype=np.float64)
    com = np.einsum("fni,n->fi", pos, masses) / masses.sum()
    return np.linalg.norm(com - com[0], axis=-1)


def rdf(frames, species_pair, r_range, bins: int):
    """Partial g(r) averaged over periodic frames.

    `frames` is a sequence of AtomicConfiguration. Ordered pairs ``(a, b)``
    are histogrammed and normalized by the ideal-gas shell count
    ``N_a * (N_b - [a == b]) / V * shell_volume``. Returns bin centers and g.
    """
    if bins < 1:
        raise ContractError("bins must be >= 1")
    r_lo, r_hi = map(float, r_range)
    if not 0 <= r_lo < r_hi:
        raise ContractError("r_range must satisfy 0 <= lo < hi")
    if len(frames) == 0:
        raise ContractError("rdf needs at least one frame")
    za, zb = species_pair
    edges = np.linspace(r_lo, r_hi, bins + 1)
    shell = 4.0 / 3.0 * np.pi * (edges[1:] ** 3 - edges[:-1] ** 3)
    total = np.zeros(bins)
    for frame in frames:
        if not isinstance(frame, AtomicConfiguration) or frame.cell is None or not all(frame.pbc):
            raise ContractError("rdf needs fully periodic frames with a cell")
        nl = build_neighbor_list(frame, r_hi)
        sel = (frame.species[nl.receivers] == za) & (frame.species[nl.senders] == zb)
        hist, _ = np.histogram(nl.distances[sel], bins=edges)
        n_a = int(np.sum(frame.species == za))
        n_b = int(np.sum(frame.species == zb)) - (1 if za == zb else 0)
        ideal = n_a * n_b / frame.volume * shell
        total += np.divide(hist, ideal, out=np.zeros(bins), where=ideal > 0)
    return 0.5 * (edges[1:] + edges[:-1]), total / len(frames)
