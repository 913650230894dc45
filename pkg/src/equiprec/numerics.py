"""Emulated floating-point formats and precision policies.

Every sub-FP64 format is emulated on float64 carriers: a value "in BF16" is a
float64 whose bit pattern happens to be exactly representable in BF16.
Rounding is always round-to-nearest, ties-to-even.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

# Fixed chunk size for deterministic parallel reductions.
REDUCTION_CHUNK = 4096


@dataclass(frozen=True)
class FloatFormat:
    name: str
    exponent_bits: int
    mantissa_bits: int
    supports_subnormals: bool = True

    def __post_init__(self):
        if self.exponent_bits < 5 or self.mantissa_bits < 7:
            raise ValueError(f"unsupported format geometry for {self.name!r}")

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def min_exponent(self) -> int:
        """Exponent of the smallest normal number."""
        return 1 - self.bias

    @property
    def max_exponent(self) -> int:
        return self.bias

    @property
    def max_finite(self) -> float:
        return (2.0 - 2.0 ** -self.mantissa_bits) * 2.0 ** self.max_exponent

    @property
    def min_normal(self) -> float:
        return 2.0 ** self.min_exponent

    @property
    def min_positive(self) -> float:
        if self.supports_subnormals:
            return 2.0 ** (self.min_exponent - self.mantissa_bits)
        return self.min_normal

    def __str__(self):
        return self.name


FP64 = FloatFormat("fp64", 11, 52, True)
FP32 = FloatFormat("fp32", 8, 23, True)
TF32 = FloatFormat("tf32", 8, 10, False)
FP16 = FloatFormat("fp16", 5, 10, True)
BF16 = FloatFormat("bf16", 8, 7, False)

FORMATS = {f.name: f for f in (FP64, FP32, TF32, FP16, BF16)}


def get_format(fmt) -> FloatFormat:
    if isinstance(fmt, FloatFormat):
        return fmt
    try:
        return FORMATS[fmt]
    except KeyError:
        raise ContractError(
            f"unknown float format {fmt!r}; expected one of {sorted(FORMATS)}"
        ) from None


def machine_epsilon(fmt) -> float:
    return 2.0 ** -get_format(fmt).mantissa_bits


def _quantize_generic(x: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Bit-level rounding of float64 data onto the grid of `fmt`.

    Dividing by the local spacing (a power of two) is exact in float64, so
    ``np.rint`` performs the ties-to-even rounding on the exact scaled value.
    """
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    finite = np.isfinite(x) & (x != 0.0)
    if not finite.any():
        return out
    xf = x[finite]
    _, e = np.frexp(xf)  # xf = f * 2**e, 0.5 <= |f| < 1
    exp = e - 1  # unbiased exponent of the leading bit
    if fmt.supports_subnormals:
        exp = np.maximum(exp, fmt.min_exponent)
    spacing_exp = exp - fmt.mantissa_bits
    q = np.ldexp(np.rint(np.ldexp(xf, -spacing_exp)), spacing_exp)
    if not fmt.supports_subnormals:
        q = np.where(np.abs(q) < fmt.min_normal, np.copysign(0.0, xf), q)
    q = np.where(np.abs(q) > fmt.max_finite, np.copysign(np.inf, xf), q)
    out[finite] = q
    return out


def quantize(x, fmt):
    """Round `x` to the nearest value representable in `fmt` (ties to even).

    Accepts scalars or arrays; returns the same kind. Overflow goes to +-inf,
    NaN propagates. FP32 and FP16 use numpy's native IEEE casts, which agree
    with the generic bit-level path (see tests).
    """
    fmt = get_format(fmt)
    scalar = np.ndim(x) == 0
    arr = np.asarray(x, dtype=np.float64)
    if fmt.name == "fp64":
        out = arr.copy() if not scalar else arr
    elif fmt.name == "fp32":
        with np.errstate(over="ignore"):
            out = arr.astype(np.float32).astype(np.float64)
    elif fmt.name == "fp16":
        with np.errstate(over="ignore"):
            out = arr.astype(np.float16).astype(np.float64)
    else:
        out = _quantize_generic(arr, fmt)
    return float(out) if scalar else out


def quantize_reference(x, fmt):
    """The generic bit-level path for every format (no native casts)."""
    fmt = get_format(fmt)
    if fmt.name == "fp64":
        return np.asarray(x, dtype=np.float64).copy()
    return _quantize_generic(np.asarray(x, dtype=np.float64), fmt)


def cast_tensor(data, fmt) -> np.ndarray:
    return quantize(np.asarray(data, dtype=np.float64).ravel(), fmt)


def ulp(x: float, fmt) -> float:
    """Spacing of the grid of `fmt` around `x`.

    Uses the binade of ``|x|``; at exact powers of two this is the upward
    spacing. Zero maps to the smallest positive representable value.
    """
    fmt = get_format(fmt)
    x = float(x)
    if x == 0.0:
        return fmt.min_positive
    if not math.isfinite(x):
        raise ValueError("ulp of a non-finite value")
    exp = math.frexp(abs(x))[1] - 1
    if exp < fmt.min_exponent:
        if not fmt.supports_subnormals:
            return fmt.min_normal
        exp = fmt.min_exponent
    return 2.0 ** (exp - fmt.mantissa_bits)


def dot_accumulate(a, b, compute_fmt, acc_fmt) -> float:
    """Dot product with emulated multiply and accumulation formats.

    Each product is rounded to `compute_fmt`, and the running sum to
    `acc_fmt` after every addition, strictly left to right.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    compute_fmt = get_format(compute_fmt)
    acc_fmt = get_format(acc_fmt)
    if a.size == 0:
        return 0.0
    products = quantize(a * b, compute_fmt)
    if acc_fmt.name == "fp64":
        acc = 0.0
        for p in products.tolist():
            acc += p
        return acc
    acc = 0.0
    for p in products.tolist():
        acc = quantize(acc + p, acc_fmt)
    return acc


def chunked_sum(values, acc_fmt=FP64, chunk: int = REDUCTION_CHUNK) -> float:
    """Deterministic reduction: sequential within fixed chunks, then across chunks."""
    v = np.asarray(values, dtype=np.float64).ravel()
    acc_fmt = get_format(acc_fmt)
    partials = []
    for start in range(0, v.size, chunk):
        s = 0.0
        for p in v[start:start + chunk].tolist():
            s = quantize(s + p, acc_fmt)
        partials.append(s)
    total = 0.0
    for p in partials:
        total = quantize(total + p, acc_fmt)
    return total


@dataclass(frozen=True)
class PrecisionPolicy:
    default_format: FloatFormat = FP64
    linear_format: FloatFormat = FP64
    accumulation_format: FloatFormat = FP64
    cast_at_block_boundaries: bool = True

    def __post_init__(self):
        for f in ("default_format", "linear_format", "accumulation_format"):
            object.__setattr__(self, f, get_format(getattr(self, f)))
        compute_bits = min(self.default_format.mantissa_bits,
                           self.linear_format.mantissa_bits)
        if self.accumulation_format.mantissa_bits < compute_bits:
            raise ContractError("accumulation format narrower than compute format")

    @property
    def is_fp64(self) -> bool:
        return all(f.name == "fp64" for f in
                   (self.default_format, self.linear_format, self.accumulation_format))

    @property
    def epsilon(self) -> float:
        """Worst epsilon among the formats the policy computes in."""
        return max(machine_epsilon(self.default_format), machine_epsilon(self.linear_format))

    @property
    def label(self) -> str:
        d, l = self.default_format.name.upper(), self.linear_format.name.upper()
        return f"{d}/{l}"

    def spec(self) -> str:
        return (f"default={self.default_format.name},linear={self.linear_format.name},"
                f"acc={self.accumulation_format.name}")

    def __str__(self):
        return self.spec()


def parse_policy(text: str) -> PrecisionPolicy:
    """Parse ``"default=fp32,linear=bf16,acc=fp32"`` or a bare format name.

    A bare name such as ``"fp32"`` sets every role to that format, except that
    half formats keep an FP32 accumulator. Missing keys inherit from
    ``default``; ``acc`` defaults to the wider of default and FP32 for half
    precision compute.
    """
    text = text.strip()
    if "=" not in text:
        fmt = get_format(text)
        acc = fmt if fmt.mantissa_bits >= 23 else FP32
        return PrecisionPolicy(fmt, fmt, acc)
    fields = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, sep, val = part.partition("=")
        key = key.strip()
        if not sep or key not in ("default", "linear", "acc", "cast"):
            raise ContractError(f"bad policy field {part!r}")
        fields[key] = val.strip()
    default = get_format(fields.get("default", "fp64"))
    linear = get_format(fields.get("linear", default.name))
    if "acc" in fields:
        acc = get_format(fields["acc"])
    else:
        acc = default if default.mantissa_bits >= 23 else FP32
    cast = fields.get("cast", "true").lower() not in ("0", "false", "no")
    return PrecisionPolicy(default, linear, acc, cast)


POLICY_FP64 = PrecisionPolicy(FP64, FP64, FP64)
POLICY_FP32 = PrecisionPolicy(FP32, FP32, FP32)
