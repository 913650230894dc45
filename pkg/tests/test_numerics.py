import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from equiprec.errors import ContractError, DimensionError
from equiprec.numerics import (
    BF16, FORMATS, FP16, FP32, FP64, TF32, PrecisionPolicy, cast_tensor,
    chunked_sum, dot_accumulate, machine_epsilon, parse_policy, quantize,
    quantize_reference, ulp,
)


def oracle_round(x: float, fmt) -> float:
    """Exact rational rounding by enumerating the two grid neighbours."""
    if x == 0 or math.isnan(x) or math.isinf(x):
        return x
    fx = Fraction(x)
    sign = -1 if fx < 0 else 1
    ax = abs(fx)
    e = math.floor(math.log2(ax))
    # correct log2 misrounding near powers of two
    while Fraction(2) ** e > ax:
        e -= 1
    while Fraction(2) ** (e + 1) <= ax:
        e += 1
    emin = 1 - (2 ** (fmt.exponent_bits - 1) - 1)
    if e < emin and fmt.supports_subnormals:
        e = emin
    step = Fraction(2) ** (e - fmt.mantissa_bits)
    lo = math.floor(ax / step)
    hi = lo + 1
    dlo, dhi = ax - lo * step, hi * step - ax
    if dlo < dhi or (dlo == dhi and lo % 2 == 0):
        m = lo
    else:
        m = hi
    val = m * step
    if not fmt.supports_subnormals and val < Fraction(2) ** emin:
        return math.copysign(0.0, x)
    if val > Fraction(fmt.max_finite):
        return sign * math.inf
    return sign * float(val)


def test_builtin_format_geometry():
    geo = {n: (f.exponent_bits, f.mantissa_bits) for n, f in FORMATS.items()}
    assert geo == {"fp64": (11, 52), "fp32": (8, 23), "tf32": (8, 10),
                   "fp16": (5, 10), "bf16": (8, 7)}


def test_machine_epsilon_values():
    assert machine_epsilon(FP32) == 2.0 ** -23
    assert machine_epsilon(FP32) == pytest.approx(1.1920929e-7, rel=1e-7)
    assert machine_epsilon(BF16) == 7.8125e-3
    assert machine_epsilon(FP64) == 2.0 ** -52
    assert machine_epsilon("fp16") == 2.0 ** -10


def test_quantize_examples():
    for f in FORMATS.values():
        assert quantize(1.0, f) == 1.0
    assert quantize(1 + 2 ** -11, FP16) == 1.0
    assert quantize(1 + 3 * 2 ** -11, FP16) == 1 + 2 ** -9
    assert quantize(70000.0, FP16) == math.inf
    assert quantize(-70000.0, FP16) == -math.inf
    assert math.isfinite(quantize(70000.0, BF16))
    assert math.isnan(quantize(math.nan, BF16))
    assert quantize(math.inf, FP16) == math.inf


def test_overflow_thresholds():
    # same exponent width => same binade ceiling
    assert math.frexp(BF16.max_finite)[1] == math.frexp(FP32.max_finite)[1]
    assert FP16.max_finite == 65504.0
    assert FP16.max_finite < BF16.max_finite
    # tie at max + half ulp rounds to even => overflow
    assert quantize(65504.0 + 16.0, FP16) == math.inf
    assert quantize(65504.0 + 15.9, FP16) == 65504.0


def test_subnormal_conventions():
    tiny = 2.0 ** -130
    assert quantize(tiny, FP32) == tiny  # FP32 keeps subnormals
    assert quantize(tiny, BF16) == 0.0   # BF16 flushes
    assert quantize(tiny, TF32) == 0.0
    assert quantize(2.0 ** -24, FP16) == 2.0 ** -24
    assert quantize(2.0 ** -26, FP16) == 0.0


@pytest.mark.parametrize("fmt", list(FORMATS.values()), ids=str)
def test_quantize_matches_rational_oracle(fmt):
    rng = np.random.default_rng(0)
    xs = np.concatenate([
        rng.standard_normal(300) * 10.0 ** rng.integers(-8, 8, 300),
        [2.0 ** -140, -3.1e-41, 6.0e-8, 65519.99, 65520.0, 1e39, 3.4e38],
    ])
    got = quantize(xs, fmt)
    for x, g in zip(xs, got):
        assert g == oracle_round(float(x), fmt) or (math.isnan(g) and math.isnan(x)), x


@pytest.mark.parametrize("fmt", [FP32, FP16], ids=str)
def test_native_casts_agree_with_bit_level_path(fmt):
    rng = np.random.default_rng(1)
    xs = rng.standard_normal(5000) * 10.0 ** rng.integers(-12, 6, 5000)
    np.testing.assert_array_equal(quantize(xs, fmt), quantize_reference(xs, fmt))


finite_floats = st.floats(allow_nan=False, allow_infinity=False, width=64,
                          min_value=-1e300, max_value=1e300)
formats = st.sampled_from(list(FORMATS.values()))


@settings(max_examples=300, deadline=None)
@given(finite_floats, formats)
def test_idempotence(x, f):
    q = quantize(x, f)
    assert quantize(q, f) == q or (math.isnan(q))


@settings(max_examples=300, deadline=None)
@given(finite_floats, finite_floats, formats)
def test_monotonicity(x, y, f):
    if x > y:
        x, y = y, x
    assert quantize(x, f) <= quantize(y, f)


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=1e-30, max_value=1e30), st.booleans(), formats)
def test_half_ulp_error_bound(x, neg, f):
    if neg:
        x = -x
    if abs(x) < f.min_normal or abs(x) > f.max_finite:
        return
    assert abs(quantize(x, f) - x) <= 0.5 * ulp(x, f)


def test_ulp_examples():
    assert ulp(1.0, FP32) == 2.0 ** -23
    assert ulp(2.0, FP32) == 2.0 ** -22
    # oracle: smallest step upward from quantize(3.7) on the BF16 grid
    q = quantize(3.7, BF16)
    nxt = q
    step = 2.0 ** -20
    while quantize(nxt, BF16) == q:
        nxt += step
    assert ulp(3.7, BF16) == quantize(nxt, BF16) - q == 2.0 ** -6
    assert ulp(0.0, FP16) == 2.0 ** -24
    assert ulp(0.0, BF16) == 2.0 ** -126


def test_dot_accumulate_examples():
    ones = np.ones(8)
    for f in FORMATS.values():
        assert dot_accumulate(ones, ones, f, f) == 8.0
    assert dot_accumulate([], [], FP16, FP32) == 0.0
    with pytest.raises(DimensionError):
        dot_accumulate([1.0, 2.0], [1.0], FP32, FP32)
    assert dot_accumulate([1.0, -1.0], [1 + 2 ** -11, 1.0], FP16, FP16) == 0.0


def test_catastrophic_cancellation():
    a, b = [1.0, -1.0], [1 + 2 ** -9, 1.0]
    # 1 + 2^-9 needs 9 fraction bits: exact in FP16, lost in BF16
    assert dot_accumulate(a, b, FP16, FP16) == 2 ** -9
    assert dot_accumulate(a, b, BF16, FP32) == 0.0
    assert dot_accumulate(a, b, FP64, FP64) == 2 ** -9


def kahan(values):
    s = 0.0
    c = 0.0
    for v in values:
        y = v - c
        t = s + y
        c = (t - s) - y
        s = t
    return s


@pytest.mark.parametrize("acc", [FP32, FP16, BF16], ids=str)
def test_dot_accumulate_forward_error_bound(acc):
    rng = np.random.default_rng(7)
    k = 1024
    a, b = rng.random(k), rng.random(k)
    exact = kahan((a * b).tolist())
    compute = acc
    got = dot_accumulate(a, b, compute, acc)
    bound = 2 * k * machine_epsilon(acc) * np.sum(np.abs(a * b))
    assert abs(got - exact) <= bound


def test_dot_accumulate_fp64_is_native():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal(500), rng.standard_normal(500)
    native = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        native += x * y
    assert dot_accumulate(a, b, FP64, FP64) == native


def test_cast_tensor():
    assert cast_tensor([], BF16).size == 0
    data = np.array([1.0, 0.5, -2.0, 0.125, 3.0])
    np.testing.assert_array_equal(cast_tensor(data, BF16), data)
    rng = np.random.default_rng(11)
    x = rng.standard_normal(10000)
    rel = np.abs(cast_tensor(x, BF16) - x) / np.abs(x)
    assert rel.max() <= 2.0 ** -8


def test_chunked_sum_independent_of_chunking_at_fp64_integers():
    vals = np.arange(10000, dtype=float)
    assert chunked_sum(vals) == float(vals.sum())


def test_policy_parsing():
    p = parse_policy("default=fp32,linear=bf16,acc=fp32")
    assert (p.default_format, p.linear_format, p.accumulation_format) == (FP32, BF16, FP32)
    assert parse_policy("fp64").is_fp64
    assert parse_policy("bf16").accumulation_format == FP32
    assert parse_policy(p.spec()) == p
    assert p.label == "FP32/BF16"
    with pytest.raises(ContractError):
        parse_policy("default=fp8")
    with pytest.raises(ContractError):
        PrecisionPolicy(FP32, FP32, FP16)
