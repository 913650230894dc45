"""Equivariant message-passing potential with selectable precision and backend.

Internal feature arrays use a uniform-multiplicity layout ``(nodes, channels,
(lmax+1)**2)``; each ``l`` occupies columns ``l*l .. (l+1)**2`` with ``m``
ordered ``-l..l`` and natural parity ``(-1)**l``. Public entry points accept
and return :class:`~equiprec.so3.EquivariantTensor` in the module default
layout and refuse anything else.

Every stage runs under a :class:`~equiprec.numerics.PrecisionPolicy`:
per-edge and per-node products round to ``default_format``, dense channel
mixes round their operands to ``linear_format``, and reductions into node
slots accumulate sequentially in ``accumulation_format`` with a
label-independent edge order.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import numerics, so3
from .errors import ContractError, DimensionError, DomainError, SetupError
from .geometry import AtomicConfiguration, build_neighbor_list

BACKENDS = ("reference_per_path", "fused_batched")
_EVALUATIONS = [0]
CHECKPOINT_VERSION = 1
FP64_POLICY = numerics.PrecisionPolicy()


@dataclass(frozen=True)
class ModelConfig:
    r_max: float = 6.0
    channels: int = 128
    sh_lmax: int = 3
    message_lmax: int = 1
    correlation: int = 3
    num_layers: int = 2
    n_bessel: int = 8
    envelope_p: int = 5
    readout_hidden: int = 16
    radial_hidden: int = 64
    neighbor_norm: float = 16.0
    species_list: tuple = (1, 6, 7, 8)
    scale: float = 1.0
    shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "species_list", tuple(int(z) for z in self.species_list))
        if self.r_max <= 0 or self.channels < 1 or self.num_layers < 1 or self.correlation < 1:
            raise ContractError("r_max, channels, num_layers and correlation must be positive")
        if self.message_lmax > self.sh_lmax:
            raise ContractError("message_lmax cannot exceed sh_lmax")
        if len(set(self.species_list)) != len(self.species_list):
            raise ContractError("duplicate species")

    @property
    def hidden_irreps(self) -> so3.Irreps:
        return _uniform_irreps(self.channels, self.message_lmax)

    @property
    def edge_irreps(self) -> so3.Irreps:
        return _uniform_irreps(self.channels, self.sh_lmax)

    def feature_lmax(self, layer: int) -> int:
        """Angular order of the node features entering `layer` (0-based)."""
        return 0 if layer == 0 else self.message_lmax

    def to_dict(self) -> dict:
        d = asdict(self)
        d["species_list"] = list(self.species_list)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _uniform_irreps(mul: int, lmax: int) -> so3.Irreps:
    return so3.Irreps([(mul, so3.Irrep(l, (-1) ** l)) for l in range(lmax + 1)])


def _dim(lmax: int) -> int:
    return (lmax + 1) ** 2


# ---------------------------------------------------------------- radial functions

def cutoff_envelope(r, r_max: float, p: int = 5):
    """Polynomial envelope ``1 - (p+1)(p+2)/2 u^p + p(p+2) u^(p+1) - p(p+1)/2 u^(p+2)``.

    Value, first and second derivative vanish at ``u = r/r_max = 1``; the
    envelope is exactly zero beyond. Accepts arrays or tape tensors.
    """
    if isinstance(r, ad.Tensor):
        u = r * (1.0 / r_max)
        up = u
        for _ in range(p - 1):
            up = up * u
        poly = (1.0 - (p + 1) * (p + 2) / 2 * up + p * (p + 2) * up * u
                - p * (p + 1) / 2 * up * u * u)
        return ad.where(u.data < 1.0, poly, 0.0)
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise DomainError("negative distance")
    u = r / r_max
    poly = (1.0 - (p + 1) * (p + 2) / 2 * u ** p + p * (p + 2) * u ** (p + 1)
            - p * (p + 1) / 2 * u ** (p + 2))
    return np.where(u < 1.0, poly, 0.0)


def radial_basis(r, cfg: ModelConfig):
    """Enveloped Bessel basis, shape ``r.shape + (n_bessel,)``."""
    tape = isinstance(r, ad.Tensor)
    data = r.data if tape else np.asarray(r, dtype=np.float64)
    if np.any(data <= 0):
        raise DomainError("radial basis needs r > 0")
    freq = np.arange(1, cfg.n_bessel + 1) * math.pi / cfg.r_max
    pref = math.sqrt(2.0 / cfg.r_max)
    if not tape:
        return (pref * np.sin(data[..., None] * freq) / data[..., None]
                * cutoff_envelope(data, cfg.r_max, cfg.envelope_p)[..., None])
    rr = ad.reshape(r, r.shape + (1,))
    env = ad.reshape(cutoff_envelope(r, cfg.r_max, cfg.envelope_p), r.shape + (1,))
    return ad.sin(rr * freq) * pref / rr * env


# ---------------------------------------------------------------- coupling plans

@lru_cache(maxsize=None)
def edge_paths(sh_lmax: int, feature_lmax: int):
    """Allowed ``(l1, l2, l3)`` with ``l1`` from the spherical harmonics,
    ``l2`` from node features and ``l3 <= sh_lmax`` in the edge features."""
    sh = so3.Irreps.spherical_harmonics(sh_lmax)
    feats = _uniform_irreps(1, feature_lmax)
    out = _uniform_irreps(1, sh_lmax)
    return tuple((l1, l2, l3) for _, _, _, l1, l2, l3 in so3.enumerate_paths(sh, feats, out))


@dataclass(frozen=True)
class EdgePlan:
    """Sparse nonzero list for the fused edge contraction."""
    paths: tuple
    y_col: np.ndarray
    h_col: np.ndarray
    out_col: np.ndarray
    path_idx: np.ndarray
    value: np.ndarray
    n_out: int


@lru_cache(maxsize=None)
def edge_plan(sh_lmax: int, feature_lmax: int) -> EdgePlan:
    paths = edge_paths(sh_lmax, feature_lmax)
    cols = [[], [], [], [], []]
    for p, (l1, l2, l3) in enumerate(paths):
        c = so3.clebsch_gordan(l1, l2, l3)
        for m1, m2, m3 in zip(*np.nonzero(c)):
            for lst, v in zip(cols, (l1 * l1 + m1, l2 * l2 + m2, l3 * l3 + m3, p,
                                     c[m1, m2, m3])):
                lst.append(v)
    ints = [np.asarray(c, dtype=np.intp) for c in cols[:4]]
    order = np.argsort(ints[2], kind="stable")
    return EdgePlan(paths, *(a[order] for a in ints),
                    np.asarray(cols[4], dtype=np.float64)[order], _dim(sh_lmax))


def _coupling_trees(nu: int, lmax: int, target: int):
    """Tensors (dim,)*nu + (2*target+1,) coupling nu copies left to right."""
    dim = _dim(lmax)
    states = []
    for l in range(lmax + 1):
        t = np.zeros((dim, 2 * l + 1))
        t[l * l:(l + 1) ** 2] = np.eye(2 * l + 1)
        states.append((t, l, l))
    for _ in range(nu - 1):
        nxt = []
        for t, lam, lsum in states:
            for l in range(lmax + 1):
                for lam2 in range(abs(lam - l), lam + l + 1):
                    c = so3.clebsch_gordan(lam, l, lam2)
                    if not c.any():
                        continue
                    block = np.zeros((dim, 2 * l + 1))
                    block[l * l:(l + 1) ** 2] = np.eye(2 * l + 1)
                    nt = np.einsum("...a,xb,abc->...xc", t, block, c)
                    nxt.append((nt, lam2, lsum + l))
        states = nxt
    return [t for t, lam, lsum in states if lam == target and (lsum + target) % 2 == 0]


@lru_cache(maxsize=None)
def generalized_cg(nu: int, lmax: int, target: int) -> np.ndarray:
    """Symmetric equivariant basis ``(n_eta,) + (dim,)*nu + (2*target+1,)``.

    Coupling trees are symmetrized over the nu slots and orthonormalized; the
    basis is scaled by ``sqrt(2*target+1)`` so that nu=1 is the plain
    selection of the ``target`` block.
    """
    dim = _dim(lmax)
    shape = (dim,) * nu + (2 * target + 1,)
    trees = _coupling_trees(nu, lmax, target)
    if not trees:
        return np.zeros((0,) + shape)
    perms = list(itertools.permutations(range(nu)))
    sym = []
    for t in trees:
        acc = np.zeros(shape)
        for p in perms:
            acc += np.transpose(t, p + (nu,))
        sym.append((acc / len(perms)).ravel())
    mat = np.array(sym)
    _, s, vt = np.linalg.svd(mat, full_matrices=False)
    rank = int(np.sum(s > 1e-9 * s[0])) if s.size and s[0] > 0 else 0
    basis = vt[:rank] * math.sqrt(2 * target + 1)
    basis[np.abs(basis) < 1e-13] = 0.0
    for row in basis:
        k = np.argmax(np.abs(row) > 1e-9 * np.abs(row).max())
        if row[k] < 0:
            row *= -1
    out = basis.reshape((rank,) + shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ProductPlan:
    """Sorted index tuples ``a1 <= ... <= a_nu`` and their folded coefficients."""
    nu: int
    target: int
    tuples: np.ndarray   # (n_tuple, nu)
    coeff: np.ndarray    # (n_tuple, n_eta, 2*target+1)

    @property
    def n_eta(self) -> int:
        return self.coeff.shape[1]


@lru_cache(maxsize=None)
def product_plan(nu: int, lmax: int, target: int) -> ProductPlan:
    basis = generalized_cg(nu, lmax, target)
    n_eta, dim = basis.shape[0], _dim(lmax)
    tuples, coeffs = [], []
    for tup in itertools.combinations_with_replacement(range(dim), nu):
        mult = math.factorial(nu)
        for _, grp in itertools.groupby(tup):
            mult //= math.factorial(len(list(grp)))
        c = basis[(slice(None),) + tup] * mult
        if np.abs(c).max(initial=0.0) > 1e-12:
            tuples.append(tup)
            coeffs.append(c)
    if not tuples:
        return ProductPlan(nu, target, np.zeros((0, nu), np.intp),
                           np.zeros((0, n_eta, 2 * target + 1)))
    return ProductPlan(nu, target, np.array(tuples, dtype=np.intp), np.array(coeffs))


def contraction_paths(cfg: ModelConfig) -> dict:
    """Number of symmetric-contraction paths per output order L."""
    return {L: sum(product_plan(nu, cfg.sh_lmax, L).n_eta
                   for nu in range(1, cfg.correlation + 1))
            for L in range(cfg.message_lmax + 1)}


# ---------------------------------------------------------------- weights

def weight_shapes(cfg: ModelConfig) -> dict:
    """Every weight array's shape, derived from the configuration alone."""
    k, ns = cfg.channels, len(cfg.species_list)
    shapes = {"embedding": (ns, k)}
    n_paths = contraction_paths(cfg)
    for t in range(cfg.num_layers):
        pre = f"layer{t}."
        lf = cfg.feature_lmax(t)
        n_edge = len(edge_paths(cfg.sh_lmax, lf))
        shapes[pre + "radial.0"] = (cfg.n_bessel, cfg.radial_hidden)
        shapes[pre + "radial.1"] = (cfg.radial_hidden, cfg.radial_hidden)
        shapes[pre + "radial.2"] = (cfg.radial_hidden, n_edge * k)
        for l in range(lf + 1):
            shapes[pre + f"mix.l{l}"] = (k, k)
            shapes[pre + f"skip.l{l}"] = (ns, k, k)
        for l in range(cfg.sh_lmax + 1):
            shapes[pre + f"contract.l{l}"] = (k, k)
        for big_l in range(cfg.message_lmax + 1):
            shapes[pre + f"message.L{big_l}"] = (ns, k, n_paths[big_l])
            shapes[pre + f"update.L{big_l}"] = (k, k)
        if t < cfg.num_layers - 1:
            shapes[f"readout{t}"] = (k, 1)
    shapes["readout_mlp.0"] = (k, cfg.readout_hidden)
    shapes["readout_mlp.1"] = (cfg.readout_hidden, 1)
    shapes["scale"] = (1,)
    shapes["shift"] = (1,)
    return shapes


def _fan_in(name: str, shape) -> int:
    if ".skip." in name:
        return shape[1]
    if ".message." in name:
        return shape[2]
    return shape[0]


class ModelWeights(dict):
    """Named FP64 weight arrays (a plain dict with construction helpers)."""

    @classmethod
    def initialize(cls, cfg: ModelConfig) -> "ModelWeights":
        """Fan-in scaled uniform initialization, deterministic in ``cfg.seed``."""
        rng = np.random.default_rng(cfg.seed)
        w = cls()
        for name, shape in weight_shapes(cfg).items():
            if name == "scale":
                w[name] = np.array([cfg.scale])
            elif name == "shift":
                w[name] = np.array([cfg.shift])
            else:
                bound = math.sqrt(3.0 / _fan_in(name, shape))
                w[name] = rng.uniform(-bound, bound, size=shape)
        return w

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.items()})


def audit_shapes(weights, cfg: ModelConfig) -> None:
    """Raise DimensionError unless `weights` holds exactly the expected arrays."""
    expected = weight_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    extra = sorted(set(weights) - set(expected))
    if missing or extra:
        raise DimensionError(f"weight names differ: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        got = tuple(np.shape(weights[name]))
        if got != tuple(shape):
            raise DimensionError(f"{name}: shape {got}, expected {tuple(shape)}")


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in weight_shapes(cfg).values()))


# ---------------------------------------------------------------- graph

@dataclass
class Graph:
    """Edges of one configuration plus the reduction order used for node sums."""
    n_nodes: int
    species_index: np.ndarray
    receivers: np.ndarray
    senders: np.ndarray
    offsets: np.ndarray     # shift @ cell per edge, Å
    vectors: np.ndarray     # r_j + offset - r_i at build time
    order: np.ndarray       # per-receiver order independent of atom labels

    @property
    def n_edges(self) -> int:
        return int(self.receivers.size)


def species_indices(species, cfg: ModelConfig) -> np.ndarray:
    lookup = {z: k for k, z in enumerate(cfg.species_list)}
    try:
        return np.array([lookup[int(z)] for z in species], dtype=np.intp)
    except KeyError as exc:
        raise ContractError(f"species {exc.args[0]} not in {cfg.species_list}") from None


def build_graph(config: AtomicConfiguration, cfg: ModelConfig, method: str = "auto") -> Graph:
    nl = build_neighbor_list(config, cfg.r_max, method=method)
    cell = config.cell if config.cell is not None else np.zeros((3, 3))
    offsets = nl.shifts @ cell if len(nl) else np.zeros((0, 3))
    v = nl.vectors
    # geometric keys make each receiver's summation order label-free
    order = np.lexsort((v[:, 2], v[:, 1], v[:, 0], nl.distances, nl.receivers))
    return Graph(len(config), species_indices(config.species, cfg), nl.receivers,
                 nl.senders, offsets, v, order)


# ---------------------------------------------------------------- precision helpers

def _round(x, fmt):
    return x if fmt.name == "fp64" else ad.quantize(x, fmt)


def _mix(subscripts, x, w, policy):
    """Dense channel mix: operands in linear format, wide accumulation."""
    lin = policy.linear_format
    y = ad.einsum(subscripts, _round(x, lin), _round(w, lin))
    return _round(_round(y, policy.accumulation_format), policy.default_format)


def _check_backend(backend: str) -> str:
    if backend not in BACKENDS:
        raise ContractError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    return backend


# ---------------------------------------------------------------- blocks

def _edge_geometry(positions, graph: Graph, policy):
    fmt = policy.default_format
    vec = (ad.take(positions, graph.senders, policy.accumulation_format) + graph.offsets
           - ad.take(positions, graph.receivers, policy.accumulation_format))
    vec = _round(vec, fmt)
    dist = _round(ad.sqrt(ad.sum(_round(vec * vec, fmt), axis=1)), fmt)
    unit = _round(vec / ad.reshape(dist, (-1, 1)), fmt)
    return unit, dist


def _spherical(unit, cfg, policy):
    with ad.block("sh"):
        return _round(so3.sh_tensor(unit, cfg.sh_lmax), policy.default_format)


def _radial(dist, params, cfg, layer, policy):
    fmt = policy.default_format
    pre = f"layer{layer}.radial."
    with ad.block("radial"):
        x = _round(radial_basis(dist, cfg), fmt)
        x = _round(ad.silu(_mix("ei,ij->ej", x, params[pre + "0"], policy)), fmt)
        x = _round(ad.silu(_mix("ei,ij->ej", x, params[pre + "1"], policy)), fmt)
        x = _mix("ei,ij->ej", x, params[pre + "2"], policy)
        return ad.reshape(x, (x.shape[0], x.shape[1] // cfg.channels, cfg.channels))


def _edge_tp(h, sh, radial, graph, params, cfg, layer, policy, backend):
    """Edge-pooled features (N, K, (sh_lmax+1)^2) from node features h (N, K, D)."""
    fmt, acc = policy.default_format, policy.accumulation_format
    lf = cfg.feature_lmax(layer)
    pre = f"layer{layer}."
    n_out = _dim(cfg.sh_lmax)
    with ad.block("edge_tp"):
        if backend == "reference_per_path":
            lin = policy.linear_format
            hj = _round(ad.take(h, graph.senders, acc), lin)
            per_l3 = {}
            for p, (l1, l2, l3) in enumerate(edge_paths(cfg.sh_lmax, lf)):
                sl1, sl2 = so3.sh_slice(l1), so3.sh_slice(l2)
                cg = so3.clebsch_gordan(l1, l2, l3)
                out = ad.einsum("ek,ea,eub,uk,abc->ekc", radial[:, p, :], sh[:, sl1],
                                hj[:, :, sl2], _round(params[pre + f"mix.l{l2}"], lin),
                                cg, optimize=False)
                out = _round(_round(out, acc), fmt)
                per_l3[l3] = out if l3 not in per_l3 else _round(per_l3[l3] + out, fmt)
            blocks = [per_l3[l] if l in per_l3
                      else ad.Tensor(np.zeros((graph.n_edges, cfg.channels, 2 * l + 1)))
                      for l in range(cfg.sh_lmax + 1)]
            msg = ad.concatenate(blocks, axis=2)
        else:
            plan = edge_plan(cfg.sh_lmax, lf)
            with ad.block("edge_mix"):
                hw = ad.concatenate(
                    [_mix("nub,uk->nkb", h[:, :, so3.sh_slice(l)], params[pre + f"mix.l{l}"],
                          policy) for l in range(lf + 1)], axis=2)
            hj = ad.take(hw, graph.senders, acc)
            yv = _round(ad.gather_last(sh, plan.y_col) * plan.value, fmt)
            rz = ad.gather_last(ad.transpose(radial, (0, 2, 1)), plan.path_idx)
            prod = _round(_round(ad.gather_last(hj, plan.h_col) * rz, fmt)
                          * ad.reshape(yv, (yv.shape[0], 1, yv.shape[1])), fmt)
            msg = _round(ad.segment_sum_last(prod, plan.out_col, n_out), fmt)
        msg = _round(msg * (1.0 / cfg.neighbor_norm), fmt)
        pooled = ad.scatter_add(msg, graph.receivers, graph.n_nodes, acc, order=graph.order)
        return _round(pooled, fmt)


def _contract(a, params, cfg, layer, policy, backend):
    """Symmetric products of mixed edge features; one (N, K, eta, 2L+1) per L."""
    fmt = policy.default_format
    pre = f"layer{layer}."
    with ad.block("symmetric_contraction"):
        with ad.block("contraction_mix"):
            mixed = ad.concatenate(
                [_mix("nua,uk->nka", a[:, :, so3.sh_slice(l)],
                      params[pre + f"contract.l{l}"], policy)
                 for l in range(cfg.sh_lmax + 1)], axis=2)
        out = []
        for big_l in range(cfg.message_lmax + 1):
            parts = []
            for nu in range(1, cfg.correlation + 1):
                if backend == "reference_per_path":
                    basis = generalized_cg(nu, cfg.sh_lmax, big_l)
                    if basis.shape[0] == 0:
                        continue
                    letters = "abcdefgh"[:nu]
                    sub = ",".join(f"nk{c}" for c in letters) + f",e{letters}m->nkem"
                    part = ad.einsum(sub, *([mixed] * nu), basis, optimize=False)
                else:
                    plan = product_plan(nu, cfg.sh_lmax, big_l)
                    if plan.n_eta == 0:
                        continue
                    x = ad.gather_last(mixed, plan.tuples[:, 0])
                    for xi in range(1, nu):
                        x = _round(x * ad.gather_last(mixed, plan.tuples[:, xi]), fmt)
                    part = ad.einsum("nkt,tem->nkem", x, plan.coeff)
                parts.append(_round(_round(part, policy.accumulation_format), fmt))
            out.append(ad.concatenate(parts, axis=2))
        return out


def _message_update(b_list, h_prev, species_index, params, cfg, layer, policy):
    fmt = policy.default_format
    pre = f"layer{layer}."
    lp = cfg.feature_lmax(layer)
    if species_index.size and (species_index.min() < 0
                               or species_index.max() >= len(cfg.species_list)):
        raise ContractError("species index out of range")
    with ad.block("message_update"):
        blocks = []
        for big_l, b in enumerate(b_list):
            w = ad.take(params[pre + f"message.L{big_l}"], species_index)
            m = _round(ad.einsum("nke,nkem->nkm", _round(w, policy.linear_format), b), fmt)
            h_new = _mix("num,uk->nkm", m, params[pre + f"update.L{big_l}"], policy)
            if big_l <= lp:
                prev = h_prev[:, :, so3.sh_slice(big_l)]
                skip_w = ad.take(params[pre + f"skip.l{big_l}"], species_index)
                lin = policy.linear_format
                skip = ad.einsum("num,nuk->nkm", _round(prev, lin), _round(skip_w, lin))
                skip = _round(_round(skip, policy.accumulation_format), fmt)
                h_new = _round(_round(h_new + prev, fmt) + skip, fmt)
            blocks.append(h_new)
        return ad.concatenate(blocks, axis=2)


def _readout(h, params, cfg, layer, policy):
    """Per-atom energy contribution (N,) from the invariant channels of h."""
    fmt = policy.default_format
    scalars = h[:, :, 0]
    with ad.block("readout"):
        if layer < cfg.num_layers - 1:
            out = _mix("nk,ko->no", scalars, params[f"readout{layer}"], policy)
        else:
            hidden = _round(ad.silu(_mix("nk,kj->nj", scalars, params["readout_mlp.0"],
                                         policy)), fmt)
            out = _mix("nj,jo->no", hidden, params["readout_mlp.1"], policy)
        return out[:, 0]


# ---------------------------------------------------------------- forward

@dataclass
class ForwardResult:
    energy: float
    atom_energies: np.ndarray
    energy_tensor: ad.Tensor
    atom_energy_tensor: ad.Tensor
    positions: ad.Tensor
    features: list = field(default_factory=list)       # h after each layer, internal layout
    edge_features: list = field(default_factory=list)  # A of each layer
    contractions: list = field(default_factory=list)   # B of each layer, one array per L

    def feature_tensor(self, layer: int, cfg: ModelConfig) -> so3.EquivariantTensor:
        return to_equivariant(self.features[layer].data, cfg.message_lmax)


def to_equivariant(arr: np.ndarray, lmax: int) -> so3.EquivariantTensor:
    """Internal (N, K, (lmax+1)^2) array -> EquivariantTensor in mul_ir layout."""
    n, k = arr.shape[:2]
    segs = [arr[:, :, so3.sh_slice(l)] for l in range(lmax + 1)]
    return so3.EquivariantTensor.from_segments(_uniform_irreps(k, lmax), segs)


def from_equivariant(t: so3.EquivariantTensor, channels: int, lmax: int) -> np.ndarray:
    expected = _uniform_irreps(channels, lmax)
    if t.layout != so3.DEFAULT_LAYOUT:
        raise ContractError(
            f"features are in {t.layout!r} layout; convert to {so3.DEFAULT_LAYOUT!r} first")
    if t.irreps != expected:
        raise ContractError(f"irreps {t.irreps} do not match expected {expected}")
    return np.concatenate([t.segment(k) for k in range(len(t.irreps))], axis=2)


def as_params(weights, requires_grad: bool = False) -> dict:
    return {k: ad.Tensor(np.asarray(v, dtype=np.float64), requires_grad=requires_grad)
            for k, v in weights.items()}


def _sorted_total(atom_energies, policy):
    """Order-independent total: sequential sum of values sorted ascending."""
    col = ad.reshape(atom_energies, (-1, 1))
    order = np.argsort(atom_energies.data, kind="stable")
    total = ad.scatter_add(col, np.zeros(col.shape[0], dtype=np.intp), 1,
                           policy.accumulation_format, order=order)
    return ad.reshape(total, ())


def evaluate(config: AtomicConfiguration, params: dict, cfg: ModelConfig,
             policy=FP64_POLICY, backend: str = "fused_batched", graph: Graph | None = None,
             positions_grad: bool = False, capture: dict | None = None) -> ForwardResult:
    """Energy on the tape. `params` maps weight names to tape tensors."""
    _check_backend(backend)
    if isinstance(policy, str):
        policy = numerics.parse_policy(policy)
    _EVALUATIONS[0] += 1
    graph = graph if graph is not None else build_graph(config, cfg)
    fmt = policy.default_format
    positions = ad.Tensor(config.positions, requires_grad=positions_grad)
    pos = _round(positions, fmt)
    unit, dist = _edge_geometry(pos, graph, policy)
    sh = _spherical(unit, cfg, policy)
    with ad.block("embedding"):
        h = _round(ad.take(params["embedding"], graph.species_index), fmt)
        h = ad.reshape(h, (graph.n_nodes, cfg.channels, 1))
    site = None
    features, edge_feats, contractions = [], [], []
    for t in range(cfg.num_layers):
        radial = _radial(dist, params, cfg, t, policy)
        a = _edge_tp(h, sh, radial, graph, params, cfg, t, policy, backend)
        b = _contract(a, params, cfg, t, policy, backend)
        h_next = _message_update(b, h, graph.species_index, params, cfg, t, policy)
        if capture is not None:
            capture[f"edge_tp/{t}"] = {"h": h.data, "sh": sh.data, "radial": radial.data,
                                       "out": a.data}
            capture[f"symmetric_contraction/{t}"] = {"a": a.data,
                                                     "out": [x.data for x in b]}
            capture[f"message_update/{t}"] = {"b": [x.data for x in b], "h": h.data,
                                              "out": h_next.data}
        h = h_next
        features.append(h)
        edge_feats.append(a)
        contractions.append(b)
        e_t = _readout(h, params, cfg, t, policy)
        site = e_t if site is None else _round(site + e_t, fmt)
    acc = policy.accumulation_format
    atom_e = _round(_round(site * params["scale"], acc) + params["shift"], acc)
    total = _sorted_total(atom_e, policy)
    return ForwardResult(float(total.data), atom_e.data.copy(), total, atom_e, positions,
                         features, edge_feats, contractions)


def evaluation_count() -> int:
    """Number of model evaluations run in this process."""
    return _EVALUATIONS[0]


def forward_energy(config, weights, cfg: ModelConfig, policy=FP64_POLICY,
                   backend: str = "fused_batched"):
    """Total energy (eV) and per-atom energies (eV)."""
    with ad.no_grad():
        res = evaluate(config, as_params(weights), cfg, policy, backend)
    return res.energy, res.atom_energies


def compute_forces(config, weights, cfg: ModelConfig, policy=FP64_POLICY,
                   backend: str = "fused_batched", return_energy: bool = False):
    """Forces ``-dE/dr`` (eV/Å) by reverse-mode differentiation under `policy`."""
    res = evaluate(config, as_params(weights), cfg, policy, backend, positions_grad=True)
    (g,) = ad.grad(res.energy_tensor, [res.positions])
    forces = -g.data
    if return_energy:
        return forces, res.energy
    return forces


def finite_difference_forces(config, weights, cfg: ModelConfig, h: float = 1e-4,
                             backend: str = "fused_batched", policy=FP64_POLICY):
    """Central differences of the energy, one coordinate at a time."""
    if h <= 0:
        raise DomainError("finite-difference step must be positive")
    params = as_params(weights)
    out = np.zeros((len(config), 3))
    with ad.no_grad():
        for i in range(len(config)):
            for d in range(3):
                energies = []
                for sign in (1.0, -1.0):
                    pos = config.positions.copy()
                    pos[i, d] += sign * h
                    energies.append(evaluate(config.copy(positions=pos), params, cfg,
                                             policy, backend).energy)
                out[i, d] = -(energies[0] - energies[1]) / (2 * h)
    return out


# ---------------------------------------------------------------- block-level entry points

def _edge_inputs(graph: Graph, params, cfg, layer, policy):
    with ad.no_grad():
        dist = np.linalg.norm(graph.vectors, axis=1)
        unit = ad.Tensor(graph.vectors / dist[:, None] if graph.n_edges else graph.vectors)
        sh = _spherical(unit, cfg, policy)
        radial = _radial(ad.Tensor(dist), params, cfg, layer, policy)
    return sh, radial


def edge_embedding_A(graph: Graph, node_features: so3.EquivariantTensor, weights,
                     cfg: ModelConfig, layer: int = 0, policy=FP64_POLICY,
                     backend: str = "fused_batched") -> so3.EquivariantTensor:
    """Edge-pooled two-body features of `layer` for the given node features."""
    _check_backend(backend)
    h = from_equivariant(node_features, cfg.channels, cfg.feature_lmax(layer))
    params = as_params(weights)
    sh, radial = _edge_inputs(graph, params, cfg, layer, policy)
    with ad.no_grad():
        a = _edge_tp(ad.Tensor(h), sh, radial, graph, params, cfg, layer, policy, backend)
    return to_equivariant(a.data, cfg.sh_lmax)


def contraction_irreps(cfg: ModelConfig) -> so3.Irreps:
    paths = contraction_paths(cfg)
    return so3.Irreps([(cfg.channels * paths[big_l], so3.Irrep(big_l, (-1) ** big_l))
                       for big_l in range(cfg.message_lmax + 1)])


def symmetric_contraction_B(a: so3.EquivariantTensor, weights, cfg: ModelConfig,
                            layer: int = 0, policy=FP64_POLICY,
                            backend: str = "fused_batched") -> so3.EquivariantTensor:
    """Node-local symmetric products; multiplicity index is (channel, path), path fastest."""
    _check_backend(backend)
    arr = from_equivariant(a, cfg.channels, cfg.sh_lmax)
    with ad.no_grad():
        b = _contract(ad.Tensor(arr), as_params(weights), cfg, layer, policy, backend)
    segs = [x.data.reshape(x.shape[0], -1, x.shape[-1]) for x in b]
    return so3.EquivariantTensor.from_segments(contraction_irreps(cfg), segs)


def split_contraction(b: so3.EquivariantTensor, cfg: ModelConfig) -> list:
    """EquivariantTensor from :func:`symmetric_contraction_B` -> list of (N, K, eta, 2L+1)."""
    if b.layout != so3.DEFAULT_LAYOUT or b.irreps != contraction_irreps(cfg):
        raise ContractError("contraction features do not match the configuration")
    paths = contraction_paths(cfg)
    return [b.segment(k).reshape(b.nodes, cfg.channels, paths[k], 2 * k + 1)
            for k in range(cfg.message_lmax + 1)]


def message_and_update(b: so3.EquivariantTensor, h_prev: so3.EquivariantTensor,
                       species_index, weights, cfg: ModelConfig, layer: int = 0,
                       policy=FP64_POLICY) -> so3.EquivariantTensor:
    """Species-weighted message, linear update, residual and species skip."""
    b_list = [ad.Tensor(x) for x in split_contraction(b, cfg)]
    h = from_equivariant(h_prev, cfg.channels, cfg.feature_lmax(layer))
    species_index = np.asarray(species_index, dtype=np.intp)
    with ad.no_grad():
        out = _message_update(b_list, ad.Tensor(h), species_index, as_params(weights), cfg,
                              layer, policy)
    return to_equivariant(out.data, cfg.message_lmax)


# ---------------------------------------------------------------- capture and replay

REPLAY_BLOCKS = ("edge_tp", "symmetric_contraction", "message_update")


def capture_blocks(config, weights, cfg: ModelConfig, backend: str = "fused_batched"):
    """Inputs and FP64 outputs of every block, keyed ``"<block>/<layer>"``."""
    records = {}
    with ad.no_grad():
        res = evaluate(config, as_params(weights), cfg, FP64_POLICY, backend, capture=records)
    graph = build_graph(config, cfg)
    for rec in records.values():
        rec["graph"] = graph
    return records, res


def replay_block_tensor(key: str, record: dict, weights, cfg: ModelConfig, policy,
                        backend: str = "fused_batched", requires_grad: bool = False):
    """Re-run one captured block under `policy` on the tape.

    Inputs are cast to the policy's default format on entry, so the replay
    sees the same values a reduced-precision pipeline would hand the block.
    Returns ``(output, inputs)``; the output is flattened to one axis.
    """
    if isinstance(policy, str):
        policy = numerics.parse_policy(policy)
    name, layer = key.split("/")
    layer = int(layer)
    fmt = policy.default_format
    params = as_params(weights)
    inputs = []

    def cast(x):
        t = ad.Tensor(numerics.quantize(x, fmt) if fmt.name != "fp64" else x,
                      requires_grad=requires_grad)
        inputs.append(t)
        return t

    graph = record["graph"]
    if name == "edge_tp":
        out = _edge_tp(cast(record["h"]), cast(record["sh"]), cast(record["radial"]),
                       graph, params, cfg, layer, policy, backend)
        flat = ad.reshape(out, (-1,))
    elif name == "symmetric_contraction":
        out = _contract(cast(record["a"]), params, cfg, layer, policy, backend)
        flat = ad.concatenate([ad.reshape(x, (-1,)) for x in out], axis=0)
    elif name == "message_update":
        out = _message_update([cast(x) for x in record["b"]], cast(record["h"]),
                              graph.species_index, params, cfg, layer, policy)
        flat = ad.reshape(out, (-1,))
    else:
        raise ContractError(f"unknown block {name!r}")
    expected = captured_output(record).shape
    if flat.shape != expected:
        raise ContractError(f"{key}: replay shape {flat.shape} != captured {expected}")
    return flat, inputs


def replay_block(key: str, record: dict, weights, cfg: ModelConfig, policy,
                 backend: str = "fused_batched") -> np.ndarray:
    """Output of one captured block re-run under `policy`, flattened."""
    with ad.no_grad():
        out, _ = replay_block_tensor(key, record, weights, cfg, policy, backend)
    return out.data


def captured_output(record: dict) -> np.ndarray:
    out = record["out"]
    if isinstance(out, list):
        return np.concatenate([x.ravel() for x in out])
    return out.ravel()


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, cfg: ModelConfig, weights) -> None:
    """Write a versioned ``.npz`` (little-endian FP64 arrays plus a JSON header)."""
    audit_shapes(weights, cfg)
    header = {"format": "equiprec-checkpoint", "version": CHECKPOINT_VERSION,
              "config": cfg.to_dict(), "names": sorted(weights)}
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in weights.items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(ModelConfig, ModelWeights)``; raises SetupError on a bad file."""
    try:
        with np.load(os.fspath(path), allow_pickle=False) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            if header.get("format") != "equiprec-checkpoint":
                raise SetupError(f"{path}: not an equiprec checkpoint")
            if header.get("version") != CHECKPOINT_VERSION:
                raise SetupError(f"{path}: unsupported checkpoint version {header.get('version')}")
            cfg = ModelConfig.from_dict(header["config"])
            weights = ModelWeights({k: np.asarray(data[k], dtype=np.float64)
                                    for k in header["names"]})
    except (OSError, KeyError, ValueError) as exc:
        raise SetupError(f"cannot read checkpoint {path}: {exc}") from exc
    audit_shapes(weights, cfg)
    return cfg, weights
