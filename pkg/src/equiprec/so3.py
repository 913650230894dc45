"""Rotation-group machinery: irreps, real spherical harmonics, Wigner D and
Clebsch–Gordan coefficients.

Conventions
-----------
Real spherical harmonics are component-normalized (``sum_m Y_lm^2 = 2l+1``,
``Y_00 = 1``) with no Condon–Shortley phase, ``m`` ordered ``-l..l``.
Components with ``m > 0`` carry ``cos(m phi)``, ``m < 0`` carry ``sin(|m| phi)``.

=====  ===========================  ===========================
 l      m = -l .. l                  relation to (x, y, z)
=====  ===========================  ===========================
 0      1                            constant
 1      sqrt(3) * (y, z, x)          D^1(Q) = P Q P^T, P: (x,y,z)->(y,z,x)
=====  ===========================  ===========================

Feature layouts: ``mul_ir`` stores each irrep segment as (multiplicity, 2l+1)
with m fastest; ``ir_mul`` stores it as (2l+1, multiplicity) with the channel
fastest.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, DomainError

LAYOUTS = ("mul_ir", "ir_mul")
DEFAULT_LAYOUT = "mul_ir"
DEFAULT_L_CAP = 3


# ---------------------------------------------------------------- irreps

@dataclass(frozen=True)
class Irrep:
    l: int
    parity: int  # +1 even, -1 odd

    def __post_init__(self):
        if self.l < 0 or self.parity not in (1, -1):
            raise ContractError(f"invalid irrep l={self.l} parity={self.parity}")

    @property
    def dim(self) -> int:
        return 2 * self.l + 1

    def __str__(self):
        return f"{self.l}{'e' if self.parity == 1 else 'o'}"


class Irreps:
    """Ordered multiset of ``(multiplicity, Irrep)`` segments."""

    _TOKEN = re.compile(r"^\s*(\d+)\s*x\s*(\d+)\s*([eo])\s*$")

    def __init__(self, spec):
        if isinstance(spec, Irreps):
            segs = list(spec.segments)
        elif isinstance(spec, str):
            segs = []
            if spec.strip():
                for tok in spec.split("+"):
                    m = self._TOKEN.match(tok)
                    if not m:
                        raise ContractError(f"cannot parse irreps token {tok!r}")
                    segs.append((int(m[1]), Irrep(int(m[2]), 1 if m[3] == "e" else -1)))
        else:
            segs = []
            for mul, ir in spec:
                if not isinstance(ir, Irrep):
                    l, p = ir
                    ir = Irrep(int(l), int(p))
                segs.append((int(mul), ir))
        for mul, _ in segs:
            if mul < 1:
                raise ContractError("multiplicities must be >= 1")
        self.segments = tuple(segs)

    @classmethod
    def spherical_harmonics(cls, lmax: int, mul: int = 1) -> "Irreps":
        return cls([(mul, Irrep(l, (-1) ** l)) for l in range(lmax + 1)])

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def __getitem__(self, k):
        return self.segments[k]

    def __eq__(self, other):
        return isinstance(other, Irreps) and self.segments == other.segments

    def __hash__(self):
        return hash(self.segments)

    def __str__(self):
        return " + ".join(f"{mul}x{ir}" for mul, ir in self.segments)

    __repr__ = __str__

    @property
    def dim(self) -> int:
        return sum(mul * ir.dim for mul, ir in self.segments)

    @property
    def lmax(self) -> int:
        return max(ir.l for _, ir in self.segments)

    def slices(self):
        out, start = [], 0
        for mul, ir in self.segments:
            out.append(slice(start, start + mul * ir.dim))
            start += mul * ir.dim
        return out


# ---------------------------------------------------------------- tensors

@dataclass
class EquivariantTensor:
    irreps: Irreps
    data: np.ndarray
    nodes: int
    layout: str = DEFAULT_LAYOUT

    def __post_init__(self):
        self.irreps = Irreps(self.irreps)
        if self.layout not in LAYOUTS:
            raise ContractError(f"unknown layout {self.layout!r}")
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.size != self.nodes * self.irreps.dim:
            raise DimensionError(
                f"data length {self.data.size} != {self.nodes} x {self.irreps.dim}")

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.nodes, self.irreps.dim)

    def segment(self, k: int) -> np.ndarray:
        """Segment `k` as (nodes, mul, 2l+1) regardless of layout."""
        mul, ir = self.irreps[k]
        block = self.array[:, self.irreps.slices()[k]]
        if self.layout == "mul_ir":
            return block.reshape(self.nodes, mul, ir.dim)
        return block.reshape(self.nodes, ir.dim, mul).transpose(0, 2, 1)

    @classmethod
    def from_segments(cls, irreps, segments, layout=DEFAULT_LAYOUT):
        irreps = Irreps(irreps)
        nodes = segments[0].shape[0]
        parts = []
        for seg in segments:
            if layout == "ir_mul":
                seg = seg.transpose(0, 2, 1)
            parts.append(seg.reshape(nodes, -1))
        return cls(irreps, np.concatenate(parts, axis=1), nodes, layout)


def layout_convert(t: EquivariantTensor, target: str) -> EquivariantTensor:
    if target not in LAYOUTS:
        raise ContractError(f"unknown layout {target!r}")
    if target == t.layout:
        return EquivariantTensor(t.irreps, t.data.copy(), t.nodes, t.layout)
    segs = [t.segment(k) for k in range(len(t.irreps))]
    return EquivariantTensor.from_segments(t.irreps, segs, target)


def reinterpret_layout(t: EquivariantTensor, assumed: str) -> EquivariantTensor:
    """Relabel the layout without moving data (the silent-mismatch failure)."""
    return EquivariantTensor(t.irreps, t.data.copy(), t.nodes, assumed)


def rotate_features(t: EquivariantTensor, rotation) -> EquivariantTensor:
    rotation = np.asarray(rotation, dtype=np.float64)
    if np.array_equal(rotation, np.eye(3)):
        return EquivariantTensor(t.irreps, t.data.copy(), t.nodes, t.layout)
    segs = []
    for k, (mul, ir) in enumerate(t.irreps):
        seg = t.segment(k)
        if ir.l > 0:
            d = wigner_d(ir.l, rotation)
            if ir.parity == -1 and np.linalg.det(rotation) < 0:
                d = -d
            seg = np.einsum("ij,nuj->nui", d, seg)
        segs.append(seg)
    return EquivariantTensor.from_segments(t.irreps, segs, t.layout)


# ---------------------------------------------------------------- spherical harmonics

@lru_cache(maxsize=None)
def _sh_norms(lmax: int) -> np.ndarray:
    out = []
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            a = abs(m)
            n = math.sqrt((2 * l + 1) * math.factorial(l - a) / math.factorial(l + a))
            out.append(n * (math.sqrt(2.0) if m else 1.0))
    return np.array(out)


def _double_factorial(n: int) -> int:
    return math.prod(range(n, 0, -2)) if n > 0 else 1


def sh_tensor(unit: ad.Tensor, lmax: int) -> ad.Tensor:
    """Real spherical harmonics of unit vectors (E, 3) -> (E, (lmax+1)^2), on the tape.

    Polynomial recurrences in (x, y, z): the Legendre factor Q_l^m(z) with
    P_l^m = sin^m(theta) Q_l^m, and cos/sin(m phi) sin^m(theta) from powers
    of (x + i y). No trigonometric functions of angles are evaluated.
    """
    unit = ad.as_tensor(unit)
    n_edges = unit.shape[0]
    x, y, z = unit[:, 0], unit[:, 1], unit[:, 2]
    one = ad.Tensor(np.ones(n_edges))
    # cos/sin parts: c_m + i s_m = (x + i y)^m
    cos_m, sin_m = [one], [ad.Tensor(np.zeros(n_edges))]
    for m in range(1, lmax + 1):
        c, s = cos_m[-1], sin_m[-1]
        cos_m.append(x * c - y * s)
        sin_m.append(x * s + y * c)
    legendre = {}
    for m in range(lmax + 1):
        legendre[(m, m)] = one * float(_double_factorial(2 * m - 1))
        if m + 1 <= lmax:
            legendre[(m + 1, m)] = z * legendre[(m, m)] * float(2 * m + 1)
        for l in range(m + 2, lmax + 1):
            legendre[(l, m)] = (z * legendre[(l - 1, m)] * float(2 * l - 1)
                                - legendre[(l - 2, m)] * float(l + m - 1)) * (1.0 / (l - m))
    q_cols, t_cols = [], []
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            q_cols.append(legendre[(l, abs(m))])
            t_cols.append(cos_m[m] if m >= 0 else sin_m[-m])
    q = ad.stack(q_cols, axis=1)
    t = ad.stack(t_cols, axis=1)
    return q * t * _sh_norms(lmax)


def real_spherical_harmonics(vectors, lmax: int) -> np.ndarray:
    """Real SH of unit vector(s); shape (..., (lmax+1)^2)."""
    v = np.asarray(vectors, dtype=np.float64)
    flat = v.reshape(-1, 3)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise DomainError("spherical harmonics of the zero vector")
    if np.any(np.abs(norms - 1) > 1e-9):
        raise DomainError("spherical harmonics require unit vectors")
    with ad.no_grad():
        out = sh_tensor(ad.Tensor(flat), lmax).data
    return out.reshape(v.shape[:-1] + (out.shape[-1],))


def sh_slice(l: int) -> slice:
    return slice(l * l, (l + 1) * (l + 1))


# ---------------------------------------------------------------- Wigner D

@lru_cache(maxsize=None)
def _fit_points(l: int):
    rng = np.random.default_rng(1234 + l)
    pts = rng.standard_normal((4 * (2 * l + 1), 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    y = real_spherical_harmonics(pts, l)[:, sh_slice(l)]
    return pts, np.linalg.pinv(y)


def check_rotation(rotation, allow_improper=False) -> np.ndarray:
    q = np.asarray(rotation, dtype=np.float64)
    if q.shape != (3, 3):
        raise DomainError("rotation must be 3x3")
    if np.abs(q @ q.T - np.eye(3)).max() > 1e-9:
        raise DomainError("rotation matrix is not orthogonal")
    det = np.linalg.det(q)
    if not allow_improper and abs(det - 1) > 1e-9:
        raise DomainError("rotation matrix must have det +1")
    return q


def wigner_d(l: int, rotation) -> np.ndarray:
    """Real representation matrix with ``Y_l(Q v) = D^l(Q) Y_l(v)``.

    Improper matrices are accepted through :func:`rotate_features`, where the
    D of ``-Q`` is used together with the parity sign.
    """
    q = check_rotation(rotation, allow_improper=True)
    if np.linalg.det(q) < 0:
        q = -q
    if l == 0:
        return np.ones((1, 1))
    pts, pinv = _fit_points(l)
    y_rot = real_spherical_harmonics(pts @ q.T, l)[:, sh_slice(l)]
    # Y(Q P) = Y(P) D^T
    return (pinv @ y_rot).T


def random_rotation(rng) -> np.ndarray:
    """Haar-random proper rotation from a numpy Generator."""
    a = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------- Clebsch–Gordan

def triangle(l1: int, l2: int, l3: int) -> bool:
    return abs(l1 - l2) <= l3 <= l1 + l2


def complex_cg(l1, m1, l2, m2, l3, m3) -> float:
    """<l1 m1 l2 m2 | l3 m3> by the Racah formula in exact rationals."""
    f = math.factorial
    if (m1 + m2 != m3 or not triangle(l1, l2, l3)
            or abs(m1) > l1 or abs(m2) > l2 or abs(m3) > l3):
        return 0.0
    pre = Fraction((2 * l3 + 1) * f(l3 + l1 - l2) * f(l3 - l1 + l2) * f(l1 + l2 - l3),
                   f(l1 + l2 + l3 + 1))
    pre *= f(l3 + m3) * f(l3 - m3) * f(l1 - m1) * f(l1 + m1) * f(l2 - m2) * f(l2 + m2)
    total = Fraction(0)
    for k in range(l1 + l2 - l3 + 1):
        den = (k, l1 + l2 - l3 - k, l1 - m1 - k, l2 + m2 - k,
               l3 - l2 + m1 + k, l3 - l1 - m2 + k)
        if min(den) < 0:
            continue
        total += Fraction((-1) ** k, math.prod(f(d) for d in den))
    # sqrt of an exact rational: split numerator/denominator for accuracy
    return float(total) * math.sqrt(pre.numerator) / math.sqrt(pre.denominator)


@lru_cache(maxsize=None)
def complex_to_real(l: int) -> np.ndarray:
    """Unitary U with Y_real = U Y_complex (complex SH with Condon–Shortley phase)."""
    u = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
    r2 = 1 / math.sqrt(2)
    for m in range(-l, l + 1):
        a = abs(m)
        if m == 0:
            u[l, l] = 1
        elif m > 0:
            u[m + l, a + l] = (-1) ** a * r2
            u[m + l, -a + l] = r2
        else:
            u[m + l, a + l] = -1j * (-1) ** a * r2
            u[m + l, -a + l] = 1j * r2
    return u


def real_m_allowed(m1: int, m2: int, m3: int, l_sum: int = 0) -> bool:
    """Selection rule of the real basis (sin/cos product identities).

    Couplings with odd ``l1 + l2 + l3`` are antisymmetric and swap the
    sin/cos character of the output.
    """
    a1, a2, a3 = abs(m1), abs(m2), abs(m3)
    if a3 not in (a1 + a2, abs(a1 - a2)):
        return False
    n_sin = int(m1 < 0) + int(m2 < 0)
    return (m3 < 0) == ((n_sin == 1) != (l_sum % 2 == 1))


@lru_cache(maxsize=None)
def clebsch_gordan(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real-basis coupling block of shape (2l1+1, 2l2+1, 2l3+1).

    ``sum_{m1,m2} C[m1,m2,m3] Y_l1m1(v) Y_l2m2(v)`` transforms like ``Y_l3``.
    """
    if min(l1, l2, l3) < 0:
        raise ContractError("angular orders must be >= 0")
    shape = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1)
    if not triangle(l1, l2, l3):
        return np.zeros(shape)
    cc = np.zeros(shape)
    for m1 in range(-l1, l1 + 1):
        for m2 in range(-l2, l2 + 1):
            m3 = m1 + m2
            if abs(m3) <= l3:
                cc[m1 + l1, m2 + l2, m3 + l3] = complex_cg(l1, m1, l2, m2, l3, m3)
    c = np.einsum("ia,jb,kc,abc->ijk", complex_to_real(l1), complex_to_real(l2),
                  complex_to_real(l3).conj(), cc)
    part = c.real if np.abs(c.real).max() >= np.abs(c.imag).max() else c.imag
    part = np.where(np.abs(part) < 1e-13, 0.0, part)
    # fix the global sign so the first nonzero entry is positive
    flat = part.ravel()
    first = flat[np.nonzero(flat)[0][0]]
    part = part * np.sign(first)
    part.setflags(write=False)
    return part


@dataclass(frozen=True)
class CGTable:
    l_cap: int
    index: np.ndarray    # (n, 6) integer (l1, m1, l2, m2, l3, m3)
    values: np.ndarray   # (n,)

    @classmethod
    def build(cls, l_cap: int = DEFAULT_L_CAP) -> "CGTable":
        rows, vals = [], []
        for l1 in range(l_cap + 1):
            for l2 in range(l_cap + 1):
                for l3 in range(l_cap + 1):
                    block = clebsch_gordan(l1, l2, l3)
                    for i, j, k in zip(*np.nonzero(block)):
                        rows.append((l1, i - l1, l2, j - l2, l3, k - l3))
                        vals.append(block[i, j, k])
        return cls(l_cap, np.array(rows, dtype=np.int64).reshape(-1, 6), np.array(vals))

    def __len__(self):
        return len(self.values)

    def block(self, l1, l2, l3) -> np.ndarray:
        return clebsch_gordan(l1, l2, l3)

    @property
    def dense_size(self) -> int:
        n = self.l_cap + 1
        return n ** 6  # sum over (l1,l2,l3) of (2l1+1)(2l2+1)(2l3+1)

    @property
    def sparsity(self) -> float:
        """Fraction of the dense (l1,m1,l2,m2,l3,m3) index space that is zero."""
        return 1.0 - len(self) / self.dense_size


# ---------------------------------------------------------------- path enumeration

def enumerate_paths(in1, in2, out):
    """Allowed couplings ``(slot1, slot2, slot_out, l1, l2, l3)`` in nested order."""
    in1, in2, out = Irreps(in1), Irreps(in2), Irreps(out)
    paths = []
    for s1, (_, ir1) in enumerate(in1):
        for s2, (_, ir2) in enumerate(in2):
            for so, (_, ir3) in enumerate(out):
                if triangle(ir1.l, ir2.l, ir3.l) and ir1.parity * ir2.parity == ir3.parity:
                    paths.append((s1, s2, so, ir1.l, ir2.l, ir3.l))
    return paths
