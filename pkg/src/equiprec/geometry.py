"""Atomic configurations, periodic neighbor search and benchmark structures."""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, ContractError, ParseError

SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe"
).split()

# standard atomic weights (amu), Z = 1..54
MASSES = (
    1.008, 4.0026, 6.94, 9.0122, 10.81, 12.011, 14.007, 15.999, 18.998, 20.180,
    22.990, 24.305, 26.982, 28.085, 30.974, 32.06, 35.45, 39.948, 39.098, 40.078,
    44.956, 47.867, 50.942, 51.996, 54.938, 55.845, 58.933, 58.693, 63.546, 65.38,
    69.723, 72.630, 74.922, 78.971, 79.904, 83.798, 85.468, 87.62, 88.906, 91.224,
    92.906, 95.95, 97.0, 101.07, 102.91, 106.42, 107.87, 112.41, 114.82, 118.71,
    121.76, 127.60, 126.90, 131.29,
)

ATOMIC_NUMBERS = {s: z for z, s in enumerate(SYMBOLS, start=1)}

DIAMOND_LATTICE_CONSTANT = 3.567  # Å
WATER_OH_BOND = 0.9572  # Å
WATER_HOH_ANGLE = 104.52  # degrees
AMU_PER_A3_TO_G_PER_CM3 = 1.66053906660


def atomic_mass(z: int) -> float:
    if not 1 <= z <= len(MASSES):
        raise ContractError(f"no mass tabulated for atomic number {z}")
    return MASSES[z - 1]


@dataclass
class AtomicConfiguration:
    positions: np.ndarray
    species: np.ndarray
    cell: np.ndarray | None = None
    pbc: tuple = (False, False, False)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        self.species = np.array(self.species, dtype=np.int64).reshape(-1)
        if self.positions.shape[0] < 1:
            raise ConfigurationError("configuration needs at least one atom")
        if self.species.shape[0] != self.positions.shape[0]:
            raise ConfigurationError("species and positions disagree in length")
        if np.any(self.species < 1):
            raise ConfigurationError("species must be positive atomic numbers")
        self.pbc = tuple(bool(p) for p in np.broadcast_to(np.asarray(self.pbc), (3,)))
        if self.cell is not None:
            self.cell = np.array(self.cell, dtype=np.float64).reshape(3, 3)
        if any(self.pbc):
            if self.cell is None:
                raise ConfigurationError("periodic configuration requires a cell")
            if abs(np.linalg.det(self.cell)) <= 1e-9:
                raise ConfigurationError("cell is singular")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def masses(self) -> np.ndarray:
        return np.array([atomic_mass(int(z)) for z in self.species])

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def volume(self) -> float:
        if self.cell is None:
            raise ContractError("configuration has no cell")
        return float(abs(np.linalg.det(self.cell)))

    @property
    def density(self) -> float:
        """Mass density in g/cm³."""
        return self.total_mass / self.volume * AMU_PER_A3_TO_G_PER_CM3

    def copy(self, **changes) -> "AtomicConfiguration":
        data = dict(positions=self.positions.copy(), species=self.species.copy(),
                    cell=None if self.cell is None else self.cell.copy(),
                    pbc=self.pbc, info=dict(self.info))
        data.update(changes)
        return AtomicConfiguration(**data)

    def wrapped(self) -> "AtomicConfiguration":
        """Positions folded into the cell along periodic axes."""
        if not any(self.pbc):
            return self.copy()
        frac = self.positions @ np.linalg.inv(self.cell)
        mask = np.array(self.pbc)
        frac[:, mask] -= np.floor(frac[:, mask])
        return self.copy(positions=frac @ self.cell)

    def __eq__(self, other):
        if not isinstance(other, AtomicConfiguration):
            return NotImplemented
        same_cell = (self.cell is None and other.cell is None) or (
            self.cell is not None and other.cell is not None
            and np.array_equal(self.cell, other.cell))
        return (np.array_equal(self.positions, other.positions)
                and np.array_equal(self.species, other.species)
                and same_cell and self.pbc == other.pbc)


@dataclass
class NeighborList:
    """Directed edges ``(i, j, shift)``; vectors point from receiver i to sender j."""
    receivers: np.ndarray
    senders: np.ndarray
    shifts: np.ndarray
    vectors: np.ndarray
    distances: np.ndarray
    r_max: float
    n_atoms: int

    def __len__(self):
        return self.receivers.shape[0]

    @property
    def edges(self):
        return [(int(i), int(j), tuple(int(v) for v in s))
                for i, j, s in zip(self.receivers, self.senders, self.shifts)]

    @property
    def average_neighbors(self) -> float:
        return len(self) / self.n_atoms


def _cell_heights(cell):
    vol = abs(np.linalg.det(cell))
    return np.array([vol / np.linalg.norm(np.cross(cell[(k + 1) % 3], cell[(k + 2) % 3]))
                     for k in range(3)])


def _prepare(config, r_max):
    if r_max <= 0:
        raise ContractError("r_max must be positive")
    pbc = np.array(config.pbc)
    if not pbc.any():
        return config.positions, np.zeros((len(config), 3), dtype=np.int64), np.zeros(3, int)
    cell = config.cell
    if abs(np.linalg.det(cell)) <= 1e-9:
        raise ConfigurationError("cell is singular")
    frac = config.positions @ np.linalg.inv(cell)
    offset = np.zeros_like(frac)
    offset[:, pbc] = np.floor(frac[:, pbc])
    wrapped = config.positions - offset @ cell
    reach = np.where(pbc, np.ceil(r_max / _cell_heights(cell)).astype(int) + 1, 0)
    return wrapped, offset.astype(np.int64), reach


def _finalize(config, r_max, i, j, shifts):
    vectors = config.positions[j] + shifts @ (config.cell if config.cell is not None
                                              else np.zeros((3, 3))) - config.positions[i]
    dist = np.sqrt(np.einsum("ei,ei->e", vectors, vectors))
    keep = (dist > 0) & (dist <= r_max)
    i, j, shifts, vectors, dist = i[keep], j[keep], shifts[keep], vectors[keep], dist[keep]
    order = np.lexsort((shifts[:, 2], shifts[:, 1], shifts[:, 0], j, i))
    return NeighborList(i[order], j[order], shifts[order], vectors[order], dist[order],
                        float(r_max), len(config))


def _shift_grid(reach):
    ranges = [range(-r, r + 1) for r in reach]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(-1, 3)


def _brute_candidates(wrapped, cell, reach, r_max):
    shifts = _shift_grid(reach)
    cvec = shifts @ cell if cell is not None else np.zeros((len(shifts), 3))
    pad = r_max * (1 + 1e-9) + 1e-9
    out_i, out_j, out_s = [], [], []
    for s, c in zip(shifts, cvec):
        d = wrapped[None, :, :] + c - wrapped[:, None, :]
        close = np.einsum("ijk,ijk->ij", d, d) <= pad * pad
        ii, jj = np.nonzero(close)
        out_i.append(ii)
        out_j.append(jj)
        out_s.append(np.broadcast_to(s, (ii.size, 3)))
    if not out_i:
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3), int)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_s)


def _cell_list_candidates(wrapped, cell, reach, r_max):
    n = wrapped.shape[0]
    shifts = _shift_grid(reach)
    cvec = shifts @ cell if cell is not None else np.zeros((len(shifts), 3))
    img_pos = (wrapped[None, :, :] + cvec[:, None, :]).reshape(-1, 3)
    img_atom = np.tile(np.arange(n), len(shifts))
    img_shift = np.repeat(shifts, n, axis=0)
    lo = wrapped.min(axis=0) - r_max
    hi = wrapped.max(axis=0) + r_max
    inside = np.all((img_pos >= lo) & (img_pos <= hi), axis=1)
    img_pos, img_atom, img_shift = img_pos[inside], img_atom[inside], img_shift[inside]
    side = r_max * (1 + 1e-9) + 1e-9
    img_bins = np.floor((img_pos - lo) / side).astype(np.int64)
    own_bins = np.floor((wrapped - lo) / side).astype(np.int64)
    table = {}
    for k, b in enumerate(map(tuple, img_bins)):
        table.setdefault(b, []).append(k)
    owners = {}
    for a, b in enumerate(map(tuple, own_bins)):
        owners.setdefault(b, []).append(a)
    offsets = list(itertools.product((-1, 0, 1), repeat=3))
    out_i, out_j, out_s = [], [], []
    for b, atoms in owners.items():
        cand = [k for off in offsets
                for k in table.get((b[0] + off[0], b[1] + off[1], b[2] + off[2]), ())]
        if not cand:
            continue
        cand = np.array(cand)
        atoms = np.array(atoms)
        d = img_pos[cand][None, :, :] - wrapped[atoms][:, None, :]
        close = np.einsum("ijk,ijk->ij", d, d) <= side * side
        ai, ci = np.nonzero(close)
        out_i.append(atoms[ai])
        out_j.append(img_atom[cand[ci]])
        out_s.append(img_shift[cand[ci]])
    if not out_i:
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3), int)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_s)


def build_neighbor_list(config: AtomicConfiguration, r_max: float,
                        method: str = "auto") -> NeighborList:
    """All directed pairs within `r_max`, including periodic replicas.

    `method` is ``"cells"``, ``"brute"`` or ``"auto"`` (cell list unless the
    system is small). Both paths produce identical sorted edge sets.
    """
    wrapped, offset, reach = _prepare(config, r_max)
    n_images = len(config) * int(np.prod(2 * reach + 1))
    if method == "auto":
        method = "brute" if len(config) * n_images < 40000 else "cells"
    if method == "brute":
        i, j, s = _brute_candidates(wrapped, config.cell, reach, r_max)
    elif method == "cells":
        i, j, s = _cell_list_candidates(wrapped, config.cell, reach, r_max)
    else:
        raise ContractError(f"unknown neighbor method {method!r}")
    # shifts relative to the unwrapped input positions
    s = s + offset[i] - offset[j]
    return _finalize(config, r_max, i, j, s)


def diamond_supercell(n: int, a: float = DIAMOND_LATTICE_CONSTANT) -> AtomicConfiguration:
    if n < 1:
        raise ContractError("supercell size must be >= 1")
    fcc = np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    basis = np.concatenate([fcc, fcc + 0.25])
    cells = np.array(list(itertools.product(range(n), repeat=3)), dtype=float)
    frac = (cells[:, None, :] + basis[None, :, :]).reshape(-1, 3)
    return AtomicConfiguration(frac * a, np.full(len(frac), 6), np.eye(3) * n * a,
                               (True, True, True))


def water_box(molecules: int, density: float = 1.0, seed: int = 0) -> AtomicConfiguration:
    """Rigid-geometry water molecules on a simple cubic grid at `density` g/cm³."""
    if molecules < 1 or density <= 0:
        raise ContractError("need >= 1 molecule and positive density")
    m_water = 2 * atomic_mass(1) + atomic_mass(8)
    volume = molecules * m_water * AMU_PER_A3_TO_G_PER_CM3 / density
    length = volume ** (1 / 3)
    per_side = math.ceil(molecules ** (1 / 3) - 1e-9)
    spacing = length / per_side
    half = math.radians(WATER_HOH_ANGLE) / 2
    local = np.array([[0, 0, 0],
                      [WATER_OH_BOND * math.sin(half), 0, WATER_OH_BOND * math.cos(half)],
                      [-WATER_OH_BOND * math.sin(half), 0, WATER_OH_BOND * math.cos(half)]])
    local -= local.mean(axis=0)
    rng = np.random.default_rng(seed)
    rotations = Rotation.random(molecules, random_state=rng).as_matrix()
    sites = np.array(list(itertools.product(range(per_side), repeat=3))[:molecules], float)
    centers = (sites + 0.5) * spacing
    pos = (centers[:, None, :] + np.einsum("mij,aj->mai", rotations, local)).reshape(-1, 3)
    species = np.tile([8, 1, 1], molecules)
    return AtomicConfiguration(pos, species, np.eye(3) * length, (True, True, True))


def perturb(config: AtomicConfiguration, amplitude: float, seed: int = 0) -> AtomicConfiguration:
    if amplitude < 0:
        raise ContractError("amplitude must be >= 0")
    rng = np.random.default_rng(seed)
    disp = rng.uniform(-amplitude, amplitude, size=config.positions.shape)
    return config.copy(positions=config.positions + disp)


def random_cluster(n_atoms: int, species=(6,), min_distance: float = 1.2,
                   box: float | None = None, seed: int = 0) -> AtomicConfiguration:
    """Non-periodic random cluster with a minimum pair distance."""
    rng = np.random.default_rng(seed)
    box = box or 1.6 * n_atoms ** (1 / 3) + 1.0
    pos = []
    while len(pos) < n_atoms:
        p = rng.uniform(0, box, 3)
        if all(np.linalg.norm(p - q) >= min_distance for q in pos):
            pos.append(p)
    z = rng.choice(np.asarray(species), n_atoms)
    return AtomicConfiguration(np.array(pos), z)


# ---------------------------------------------------------------- extended XYZ

_KV = re.compile(r'(\w+)=("[^"]*"|\S+)')


def _parse_comment(line):
    out = {}
    for key, val in _KV.findall(line):
        out[key] = val.strip('"')
    return out


def parse_xyz(text: str) -> list[AtomicConfiguration]:
    lines = text.splitlines()
    frames = []
    k = 0
    while k < len(lines):
        if not lines[k].strip():
            k += 1
            continue
        try:
            n = int(lines[k].strip())
        except ValueError:
            raise ParseError(f"expected atom count, got {lines[k]!r}", k + 1) from None
        if n < 1:
            raise ParseError("atom count must be positive", k + 1)
        comment = lines[k + 1] if k + 1 < len(lines) else ""
        meta = _parse_comment(comment)
        species, pos = [], []
        for a in range(n):
            ln = k + 2 + a
            if ln >= len(lines):
                raise ParseError(f"frame declares {n} atoms but file ends early", ln + 1)
            parts = lines[ln].split()
            if len(parts) < 4:
                raise ParseError(f"short atom line {lines[ln]!r}", ln + 1)
            sym = parts[0]
            if sym not in ATOMIC_NUMBERS:
                raise ParseError(f"unknown element symbol {sym!r}", ln + 1)
            species.append(ATOMIC_NUMBERS[sym])
            try:
                pos.append([float(v) for v in parts[1:4]])
            except ValueError:
                raise ParseError(f"bad coordinates {lines[ln]!r}", ln + 1) from None
        cell, pbc = None, (False, False, False)
        if "Lattice" in meta:
            vals = [float(v) for v in meta.pop("Lattice").split()]
            if len(vals) != 9:
                raise ParseError("Lattice needs 9 numbers", k + 2)
            cell = np.array(vals).reshape(3, 3)
            pbc = (True, True, True)
        if "pbc" in meta:
            flags = meta.pop("pbc").split()
            pbc = tuple(f.upper() in ("T", "TRUE", "1") for f in flags)
        meta.pop("Properties", None)
        try:
            frames.append(AtomicConfiguration(np.array(pos), species, cell, pbc, meta))
        except ConfigurationError as exc:
            raise ParseError(str(exc), k + 1) from None
        k += 2 + n
    return frames


def write_xyz(configs) -> str:
    if isinstance(configs, AtomicConfiguration):
        configs = [configs]
    out = []
    for c in configs:
        fields = []
        if c.cell is not None:
            fields.append('Lattice="' + " ".join(repr(float(v)) for v in c.cell.ravel()) + '"')
        fields.append("Properties=species:S:1:pos:R:3")
        for key, val in c.info.items():
            fields.append(f"{key}={val}")
        fields.append('pbc="' + " ".join("T" if p else "F" for p in c.pbc) + '"')
        out.append(str(len(c)))
        out.append(" ".join(fields))
        for z, p in zip(c.species, c.positions):
            out.append(f"{SYMBOLS[z - 1]} " + " ".join(repr(float(v)) for v in p))
    return "\n".join(out) + "\n"
