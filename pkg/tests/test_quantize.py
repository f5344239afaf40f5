import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from effadam.linalg import RandomStream
from effadam.quantize import (
    ExactIdentity,
    Identity,
    LogGrid,
    NormUniform,
    QuantizedMessage,
    Terngrad,
    TopK,
    calibrate_normuniform,
    contract_of,
    decode,
    encode,
    message_bits,
    normuniform_delta,
    parse_kind,
    quantize,
    range_violations,
)

DETERMINISTIC = [Identity(), ExactIdentity(), NormUniform(1), NormUniform(3), LogGrid(-17, -11), LogGrid(-2, 0), TopK(0.5), TopK(0.1)]
ALL_KINDS = DETERMINISTIC + [Terngrad()]

vectors = arrays(
    np.float64,
    st.integers(1, 64),
    elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, allow_subnormal=True),
)


def _in_range(kind, x):
    """Scale LogGrid inputs into the range where its contract holds."""
    if isinstance(kind, LogGrid):
        m = np.max(np.abs(x))
        if m > kind.range_limit:
            x = x * (kind.range_limit / m)
    return x


# -- examples -----------------------------------------------------------------


def test_loggrid_examples():
    lg = LogGrid(-2, 0)
    assert quantize(lg, [0.3]).tolist() == [0.25]
    assert quantize(lg, [0.1]).tolist() == [0.0]
    assert quantize(lg, [-0.6, 0.0, 1.4, 5.0]).tolist() == [-0.5, 0.0, 1.0, 1.0]
    assert quantize(LogGrid(-17, -11), np.zeros(4)).tolist() == [0.0] * 4


def test_normuniform_examples():
    nu = NormUniform(1)
    # the scale travels as binary32, so 0.9 comes back as float32(0.9)
    assert quantize(nu, [0.9, -0.2]).tolist() == [float(np.float32(0.9)), 0.0]
    assert quantize(nu, [-1.0]).tolist() == [-1.0]
    assert quantize(nu, [0.0, 0.0]).tolist() == [0.0, 0.0]


def test_normuniform_ties_round_toward_zero():
    assert quantize(NormUniform(1), [1.0, 0.5, -0.5]).tolist() == [1.0, 0.0, 0.0]
    assert quantize(NormUniform(2), [1.0, 0.5]).tolist() == [1.0, 1.0 / 3.0]


def test_normuniform_flushes_tiny_scale():
    assert quantize(NormUniform(1), [1e-40, -1e-40]).tolist() == [0.0, 0.0]


def test_identity_truncates_to_binary32():
    q = quantize(Identity(), [0.1, -0.1, 1.5])
    assert q[2] == 1.5
    assert float(np.float32(q[0])) == q[0] and 0 < q[0] <= 0.1
    assert q[1] == -q[0]
    x = np.array([0.25, -3.0, 7.5])
    assert np.array_equal(quantize(Identity(), x), x)


def test_topk_example():
    assert quantize(TopK(0.5), [3.0, -1.0, 0.5, 2.0]).tolist() == [3.0, 0.0, 0.0, 2.0]
    assert TopK(0.3).count(10) == 3


def test_outputs_have_no_negative_zero():
    for kind in DETERMINISTIC:
        q = quantize(kind, [-1e-30, -0.0, -2.0, 1.0])
        assert not np.any(np.signbit(q) & (q == 0)), kind


@pytest.mark.parametrize(
    "call",
    [
        lambda: LogGrid(0, 0),
        lambda: NormUniform(0),
        lambda: TopK(0.0),
        lambda: TopK(1.5),
        lambda: parse_kind("bogus"),
        lambda: parse_kind("loggrid:1"),
        lambda: quantize(Identity(), [np.nan]),
        lambda: quantize(NormUniform(1), [np.inf, 1.0]),
        lambda: quantize(Terngrad(), [1.0]),
        lambda: quantize(Identity(), [1e300]),
    ],
)
def test_argument_errors(call):
    with pytest.raises(ValueError):
        call()


def test_parse_kind_roundtrip():
    for kind in ALL_KINDS:
        assert parse_kind(kind.spec) == kind


def test_loggrid_range_violations():
    lg = LogGrid(-2, 0)
    assert lg.range_limit == 1.5
    assert range_violations(lg, [1.5, 0.2]) == 0
    assert range_violations(lg, [[1.6, 0.2], [0.1, 0.1], [-2.0, 0.0]]) == 2
    assert range_violations(Identity(), [1e9]) == 0


# -- contracts ----------------------------------------------------------------


def test_contract_examples():
    c = contract_of(LogGrid(-17, -11), 500)
    assert c.delta == 0.5
    assert c.delta_prime == pytest.approx(2.0**-17 * math.sqrt(500), rel=1e-15)
    assert c.delta_prime == pytest.approx(1.706e-4, rel=1e-3)
    ex = contract_of(ExactIdentity(), 500)
    assert (ex.delta, ex.delta_prime) == (1.0, 0.0) and ex.is_compressor
    top = contract_of(TopK(1.0), 37)
    assert (top.delta, top.delta_prime) == (1.0, 0.0)
    assert contract_of(TopK(0.5), 500).delta == pytest.approx(1 - math.sqrt(0.5))
    assert not contract_of(Terngrad(), 10).guaranteed
    ident = contract_of(Identity(), 500)
    assert 1 - ident.delta == 2.0**-23


def _check_contract(kind, x):
    c = contract_of(kind, x.shape[-1])
    q = quantize(kind, x)
    nx = np.linalg.norm(x)
    assert np.linalg.norm(x - q) <= (1 - c.delta) * nx + c.delta_prime + 1e-12
    assert np.linalg.norm(q) <= (2 - c.delta) * nx + 1e-12
    if isinstance(kind, LogGrid):
        assert np.linalg.norm(q) <= nx
    if c.is_compressor:
        assert np.linalg.norm(x - q) <= (1 - c.delta) * nx * (1 + 1e-15)


@settings(max_examples=300)
@given(vectors, st.sampled_from(DETERMINISTIC))
def test_contract_property(x, kind):
    _check_contract(kind, _in_range(kind, x))


@settings(max_examples=100)
@given(vectors, st.sampled_from([LogGrid(-17, -11), LogGrid(-2, 0)]), st.floats(1e-7, 1.0))
def test_loggrid_contract_small_inputs(x, kind, scale):
    m = np.max(np.abs(x))
    if m > 0:
        x = x / m * kind.range_limit * scale
    _check_contract(kind, x)


def test_normuniform_analytic_worst_case_is_tight():
    k, d = 1, 500
    half = 1.0 / (2 * NormUniform(k).levels)
    x = np.full(d, half)
    x[0] = 1.0
    q = quantize(NormUniform(k), x)
    ratio = np.linalg.norm(x - q) / np.linalg.norm(x)
    bound = 1 - normuniform_delta(k, d)
    assert ratio <= bound
    assert bound - ratio < 1e-6


def test_normuniform_calibration_below_analytic_bound():
    measured = calibrate_normuniform(1, 500, 20_000, RandomStream(3))
    bound = 1 - normuniform_delta(1, 500)
    assert measured <= bound + 1e-12
    assert measured > bound - 0.01


@settings(max_examples=200)
@given(vectors, st.sampled_from(DETERMINISTIC))
def test_idempotence(x, kind):
    x = _in_range(kind, x)
    q = quantize(kind, x)
    assert np.array_equal(quantize(kind, q), q)


def test_rowwise_matches_single_rows():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((7, 33)) * 1e-3
    for kind in DETERMINISTIC:
        Q = quantize(kind, X)
        for i in range(7):
            assert np.array_equal(Q[i], quantize(kind, X[i]))


def test_terngrad_unbiased():
    x = np.array([0.3, -0.7, 0.05, 0.0, 1.0, -0.2])
    draws = quantize(Terngrad(), np.tile(x, (10**4, 1)), RandomStream(9))
    s = float(np.float32(1.0))
    assert set(np.unique(np.abs(draws))) <= {0.0, s}
    se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 3 * se + 1e-15)


# -- codec --------------------------------------------------------------------


def test_bit_lengths():
    assert message_bits(NormUniform(1), 500) == 1032
    assert message_bits(LogGrid(-17, -11), 500) == 2000
    assert message_bits(Identity(), 500) == 16000
    assert message_bits(ExactIdentity(), 500) == 32000
    assert message_bits(Terngrad(), 500) == 1032
    assert message_bits(TopK(0.5), 500) == 250 * (9 + 64)
    assert message_bits(NormUniform(3), 10) == 32 + 10 * 4


@settings(max_examples=300)
@given(vectors, st.sampled_from(ALL_KINDS), st.integers(0, 1000))
def test_codec_roundtrip(x, kind, seed):
    if isinstance(kind, (Identity, NormUniform, Terngrad)):
        x = np.clip(x, -1e30, 1e30)
    q = quantize(kind, x, RandomStream(seed))
    msg = encode(kind, q)
    assert msg.bit_len == message_bits(kind, x.shape[0])
    assert len(msg.bits()) == msg.bit_len
    out = decode(msg)
    assert out.view(np.uint64).tolist() == q.view(np.uint64).tolist()


def test_payload_layout_normuniform():
    msg = encode(NormUniform(1), np.array([1.0, -1.0, 0.0]))
    bits = msg.bits()
    assert bits[:32] == format(np.float32(1.0).view(np.uint32), "032b")
    assert bits[32:] == "10" + "00" + "01"


def test_payload_layout_loggrid():
    msg = encode(LogGrid(-2, 0), np.array([0.25, -1.0, 0.0]))
    # 1 sign bit + 2 index bits; index 0 is zero, j - k + 1 encodes 2^j
    assert msg.bits() == "001" + "111" + "000"


@pytest.mark.parametrize(
    "kind, q",
    [
        (Identity(), [0.1]),
        (NormUniform(1), [1.0, 0.5]),
        (LogGrid(-2, 0), [0.3]),
        (LogGrid(-2, 0), [2.0]),
        (Terngrad(), [1.0, 0.5]),
        (TopK(0.5), [1.0, 2.0, 3.0, 0.0]),
        (ExactIdentity(), [-0.0]),
    ],
)
def test_encode_rejects_non_codebook(kind, q):
    with pytest.raises(ValueError):
        encode(kind, np.array(q))


def test_message_validates_length():
    good = encode(NormUniform(1), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        QuantizedMessage(good.kind, good.payload, good.bit_len + 1, good.dim)
    with pytest.raises(ValueError):
        QuantizedMessage(good.kind, good.payload + b"\x00", good.bit_len, good.dim)
