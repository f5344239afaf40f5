"""Quantizers, their error contracts, and bit-exact wire codecs.

Every quantizer works row-wise on arrays of shape ``(..., d)`` so the same
code path serves a single message and a stack of messages.

A quantizer with contract ``(delta, delta_prime)`` guarantees, for every
input row ``x``::

    ||x - Q(x)|| <= (1 - delta) * ||x|| + delta_prime
    ||Q(x)||     <= (2 - delta) * ||x||

``delta_prime == 0`` is the compressor case.

Wire formats (MSB-first bit string, no header beyond what is listed):

=============  =====================================================
kind           layout
=============  =====================================================
identity       d x binary32
exact          d x binary64
normuniform:k  binary32 scale, then d x ceil(log2(2^(k+1)-1))-bit level
               index (index = level + 2^k - 1)
loggrid:k:K    d x (1 sign bit + ceil(log2(K-k+2))-bit magnitude index;
               index 0 is the zero symbol, j - k + 1 encodes 2^j)
terngrad       binary32 scale, then d x 2-bit symbol (0, +s, -s)
topk:f         ceil(f*d) x (ceil(log2 d)-bit index + binary64 value),
               ascending index order
=============  =====================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from effadam.linalg import RandomStream

FLOAT32_MAX = float(np.finfo(np.float32).max)
FLOAT32_TINY = float(np.finfo(np.float32).tiny)  # smallest normal, 2**-126


# ---------------------------------------------------------------------------
# kinds


@dataclass(frozen=True)
class Identity:
    """32-bit float wire format; magnitudes are truncated toward zero."""

    @property
    def spec(self) -> str:
        return "identity"


@dataclass(frozen=True)
class ExactIdentity:
    """binary64 pass-through. Used for equivalence checks against serial Adam."""

    @property
    def spec(self) -> str:
        return "exact"


@dataclass(frozen=True)
class NormUniform:
    """Sup-norm scaled uniform grid with 2^(k+1)-1 levels in [-1, 1]."""

    k: int = 1

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"NormUniform needs an integer k >= 1, got {self.k}")

    @property
    def levels(self) -> int:
        return 2**self.k - 1

    @property
    def spec(self) -> str:
        return f"normuniform:{self.k}"


@dataclass(frozen=True)
class LogGrid:
    """Signed powers of two 2^k..2^K with magnitude flooring; |x| < 2^k maps to 0."""

    k: int = -17
    K: int = -11

    def __post_init__(self):
        if int(self.k) != self.k or int(self.K) != self.K:
            raise ValueError("LogGrid exponents must be integers")
        if self.K <= self.k:
            raise ValueError(f"LogGrid needs K > k, got k={self.k}, K={self.K}")

    @property
    def range_limit(self) -> float:
        """Largest sup-norm for which the (1/2, 2^k sqrt(d)) contract is guaranteed."""
        return 2.0**self.K + 2.0 ** (self.K - 1)

    @property
    def spec(self) -> str:
        return f"loggrid:{self.k}:{self.K}"


@dataclass(frozen=True)
class Terngrad:
    """Unbiased stochastic ternary quantizer {0, +s, -s}."""

    @property
    def spec(self) -> str:
        return "terngrad"


@dataclass(frozen=True)
class TopK:
    """Keeps the ceil(fraction * d) largest-magnitude coordinates."""

    fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"TopK fraction must lie in (0, 1], got {self.fraction}")

    def count(self, d: int) -> int:
        # round() guards against 0.3 * 10 == 3.0000000000000004
        return max(1, math.ceil(round(self.fraction * d, 9)))

    @property
    def spec(self) -> str:
        return f"topk:{self.fraction:g}"


QuantizerKind = Union[Identity, ExactIdentity, NormUniform, LogGrid, Terngrad, TopK]

STOCHASTIC_KINDS = (Terngrad,)


def parse_kind(text: str) -> QuantizerKind:
    """Parse ``identity``, ``exact``, ``normuniform:1``, ``loggrid:-17:-11``,
    ``terngrad`` or ``topk:0.5``."""
    parts = text.strip().lower().split(":")
    name, args = parts[0], parts[1:]
    try:
        if name == "identity" and not args:
            return Identity()
        if name == "exact" and not args:
            return ExactIdentity()
        if name == "normuniform" and len(args) <= 1:
            return NormUniform(int(args[0]) if args else 1)
        if name == "loggrid" and len(args) in (0, 2):
            return LogGrid(int(args[0]), int(args[1])) if args else LogGrid()
        if name == "terngrad" and not args:
            return Terngrad()
        if name == "topk" and len(args) == 1:
            return TopK(float(args[0]))
    except ValueError as exc:
        raise ValueError(f"bad quantizer spec {text!r}: {exc}") from None
    raise ValueError(f"unknown quantizer spec {text!r}")


def is_stochastic(kind: QuantizerKind) -> bool:
    return isinstance(kind, STOCHASTIC_KINDS)


# ---------------------------------------------------------------------------
# quantize


def _round_f32_toward_zero(x: np.ndarray) -> np.ndarray:
    f = x.astype(np.float32)
    back = f.astype(np.float64)
    over = np.abs(back) > np.abs(x)
    if np.any(over):
        f = np.where(over, np.nextafter(f, np.float32(0.0)), f)
    return f.astype(np.float64)


def _round_f32_up(x: np.ndarray) -> np.ndarray:
    """Round non-negative values up to the next binary32."""
    f = x.astype(np.float32)
    under = f.astype(np.float64) < x
    if np.any(under):
        f = np.where(under, np.nextafter(f, np.float32(np.inf)), f)
    return f.astype(np.float64)


def _f32_scale(m: np.ndarray) -> np.ndarray:
    """Nearest binary32 of the sup norm, flushing the subnormal range to zero."""
    s = m.astype(np.float32).astype(np.float64)
    return np.where(s < FLOAT32_TINY, 0.0, s)


def _check_f32_range(x: np.ndarray, kind: QuantizerKind) -> None:
    if x.size and np.max(np.abs(x)) > FLOAT32_MAX:
        raise ValueError(f"{kind.spec}: magnitude exceeds the binary32 range")


def _normuniform_indices(x: np.ndarray, s: np.ndarray, levels: int) -> np.ndarray:
    safe = np.where(s > 0, s, 1.0)
    scaled = (x / safe) * levels
    # nearest level, exact ties toward zero
    idx = np.sign(scaled) * np.ceil(np.abs(scaled) - 0.5)
    idx = np.clip(idx, -levels, levels)
    return np.where(s > 0, idx, 0.0)


def _topk_mask(x: np.ndarray, count: int) -> np.ndarray:
    order = np.argsort(-np.abs(x), axis=-1, kind="stable")
    keep = order[..., :count]
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, keep, True, axis=-1)
    return mask


def quantize(kind: QuantizerKind, x, stream: Optional[RandomStream] = None) -> np.ndarray:
    """Apply ``kind`` row-wise to ``x`` (shape ``(d,)`` or ``(..., d)``).

    The result lies in the kind's codebook, so ``decode(encode(kind, q))``
    reproduces it bit for bit. Outputs never contain negative zero.
    ``stream`` is required for (and only used by) Terngrad.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("quantize needs at least one coordinate")
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize input has non-finite entries")

    if isinstance(kind, ExactIdentity):
        q = x.copy()
    elif isinstance(kind, Identity):
        _check_f32_range(x, kind)
        q = _round_f32_toward_zero(x)
    elif isinstance(kind, NormUniform):
        _check_f32_range(x, kind)
        s = _f32_scale(np.max(np.abs(x), axis=-1, keepdims=True))
        idx = _normuniform_indices(x, s, kind.levels)
        q = s * (idx / kind.levels)
    elif isinstance(kind, LogGrid):
        a = np.abs(x)
        _, e = np.frexp(a)
        j = np.minimum(e - 1, kind.K)  # floor(log2 a), clamped at the top
        mag = np.ldexp(1.0, j)
        q = np.where(a < 2.0**kind.k, 0.0, np.sign(x) * mag)
    elif isinstance(kind, Terngrad):
        if stream is None:
            raise ValueError("Terngrad needs a random stream")
        _check_f32_range(x, kind)
        s = _round_f32_up(np.max(np.abs(x), axis=-1, keepdims=True))
        u = stream.uniform(x.shape)
        p = np.abs(x) / np.where(s > 0, s, 1.0)
        q = np.where(u < p, np.sign(x) * s, 0.0)
    elif isinstance(kind, TopK):
        q = np.where(_topk_mask(x, kind.count(x.shape[-1])), x, 0.0)
    else:
        raise TypeError(f"unknown quantizer kind {kind!r}")
    return q + 0.0


def range_violations(kind: QuantizerKind, x) -> int:
    """Number of rows whose sup norm exceeds the LogGrid contract range."""
    if not isinstance(kind, LogGrid):
        return 0
    x = np.asarray(x, dtype=np.float64)
    m = np.max(np.abs(x), axis=-1)
    return int(np.count_nonzero(m > kind.range_limit))


# ---------------------------------------------------------------------------
# contracts


@dataclass(frozen=True)
class QuantizerContract:
    """(delta, delta') guarantee of a quantizer at a given dimension.

    ``delta`` is None for stochastic kinds, which carry no such guarantee.
    """

    delta: Optional[float]
    delta_prime: Optional[float]
    provenance: str = "exact"

    def __post_init__(self):
        if self.delta is None:
            return
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.delta_prime is None or self.delta_prime < 0:
            raise ValueError("delta_prime must be >= 0")

    @property
    def guaranteed(self) -> bool:
        return self.delta is not None

    @property
    def is_compressor(self) -> bool:
        return self.delta is not None and self.delta_prime == 0.0


def normuniform_delta(k: int, d: int) -> float:
    """Worst-case delta of NormUniform(k) in dimension d.

    The worst input has one coordinate at the sup norm and all others half a
    grid step away from zero; the binary32 rounding of the scale adds the
    2**-24 slack terms.
    """
    r = 1.0 / (2.0 * (2**k - 1))
    u = (d - 1) * (r * (1.0 + 2.0**-24)) ** 2
    ratio = math.sqrt((2.0**-48 + u) / (1.0 + u))
    return 1.0 - ratio


def contract_of(kind: QuantizerKind, dim: int) -> QuantizerContract:
    if dim < 1:
        raise ValueError("dim must be positive")
    if isinstance(kind, ExactIdentity):
        return QuantizerContract(1.0, 0.0, "exact")
    if isinstance(kind, Identity):
        # truncation: |err_i| <= 2^-23 |x_i| (normal) or < 2^-149 (subnormal)
        return QuantizerContract(1.0 - 2.0**-23, 2.0**-149 * math.sqrt(dim), "binary32 truncation")
    if isinstance(kind, LogGrid):
        return QuantizerContract(0.5, 2.0**kind.k * math.sqrt(dim), "flooring analysis")
    if isinstance(kind, TopK):
        kept = kind.count(dim)
        return QuantizerContract(1.0 - math.sqrt(1.0 - kept / dim), 0.0, "analytic")
    if isinstance(kind, NormUniform):
        # scales below the smallest normal binary32 are flushed to zero
        return QuantizerContract(
            normuniform_delta(kind.k, dim), FLOAT32_TINY * math.sqrt(dim), "analytic, calibrated"
        )
    if isinstance(kind, Terngrad):
        return QuantizerContract(None, None, "stochastic, unbiased, no deterministic guarantee")
    raise TypeError(f"unknown quantizer kind {kind!r}")


def calibrate_normuniform(k: int, d: int, samples: int, stream: RandomStream, batch: int = 4096) -> float:
    """Largest observed ||x - Q(x)|| / ||x|| over adversarial and random inputs.

    Half the samples sit near the analytic worst case (one coordinate at the
    sup norm, the rest jittered around half a grid step); the rest are plain
    Gaussian vectors. Used to check ``normuniform_delta`` from the other side.
    """
    kind = NormUniform(k)
    half_step = 1.0 / (2.0 * kind.levels)
    worst = 0.0
    done = 0
    while done < samples:
        n = min(batch, samples - done)
        n_adv = n // 2
        adv = half_step * (1.0 + 1e-3 * (stream.uniform((n_adv, d)) - 0.5))
        adv *= np.where(stream.uniform((n_adv, d)) < 0.5, -1.0, 1.0)
        adv[:, 0] = 1.0
        rnd = stream.gaussian((n - n_adv, d))
        x = np.concatenate([adv, rnd]) * np.exp(stream.gaussian((n, 1)))
        err = np.linalg.norm(x - quantize(kind, x), axis=-1)
        worst = max(worst, float(np.max(err / np.linalg.norm(x, axis=-1))))
        done += n
    return worst


# ---------------------------------------------------------------------------
# codec


def _ceil_log2(n: int) -> int:
    return (n - 1).bit_length() if n > 1 else 0


def message_bits(kind: QuantizerKind, dim: int) -> int:
    """Closed-form payload length of one encoded message."""
    if isinstance(kind, Identity):
        return 32 * dim
    if isinstance(kind, ExactIdentity):
        return 64 * dim
    if isinstance(kind, NormUniform):
        return 32 + dim * _ceil_log2(2 ** (kind.k + 1) - 1)
    if isinstance(kind, LogGrid):
        return dim * (1 + _ceil_log2(kind.K - kind.k + 2))
    if isinstance(kind, Terngrad):
        return 32 + 2 * dim
    if isinstance(kind, TopK):
        return kind.count(dim) * (_ceil_log2(dim) + 64)
    raise TypeError(f"unknown quantizer kind {kind!r}")


@dataclass(frozen=True)
class QuantizedMessage:
    kind: QuantizerKind
    payload: bytes
    bit_len: int
    dim: int

    def __post_init__(self):
        if self.bit_len != message_bits(self.kind, self.dim):
            raise ValueError("bit_len does not match the closed form for this kind")
        if len(self.payload) != (self.bit_len + 7) // 8:
            raise ValueError("payload length does not match bit_len")

    def bits(self) -> str:
        """Payload as a '0'/'1' string of exactly ``bit_len`` characters."""
        raw = np.unpackbits(np.frombuffer(self.payload, dtype=np.uint8))[: self.bit_len]
        return "".join("1" if b else "0" for b in raw)


def _fields_to_bits(values: np.ndarray, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(0, dtype=np.uint8)
    values = np.asarray(values, dtype=np.uint64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    return ((values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).ravel()


def _bits_to_fields(bits: np.ndarray, width: int, count: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.uint64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    b = bits[: width * count].reshape(count, width).astype(np.uint64)
    return np.bitwise_or.reduce(b << shifts, axis=1)


def _f32_bits(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).view(np.uint32).astype(np.uint64)


def _bits_f32(fields: np.ndarray) -> np.ndarray:
    return fields.astype(np.uint32).view(np.float32).astype(np.float64)


class _Reader:
    def __init__(self, bits: np.ndarray):
        self.bits = bits
        self.pos = 0

    def take(self, width: int, count: int) -> np.ndarray:
        out = _bits_to_fields(self.bits[self.pos :], width, count)
        self.pos += width * count
        return out


def _not_in_codebook(kind: QuantizerKind) -> ValueError:
    return ValueError(f"vector is not in the {kind.spec} codebook")


def encode(kind: QuantizerKind, q) -> QuantizedMessage:
    """Serialize a codebook vector; raises ValueError if ``q`` is not one."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0 or not np.all(np.isfinite(q)):
        raise ValueError("encode needs a finite, non-empty 1-D vector")
    if np.any(np.signbit(q) & (q == 0)):
        raise ValueError("codebook vectors never contain negative zero")
    d = q.shape[0]
    parts: list[np.ndarray] = []

    if isinstance(kind, ExactIdentity):
        parts.append(_fields_to_bits(q.view(np.uint64), 64))
    elif isinstance(kind, Identity):
        f = q.astype(np.float32)
        if not np.array_equal(f.astype(np.float64), q):
            raise _not_in_codebook(kind)
        parts.append(_fields_to_bits(_f32_bits(f), 32))
    elif isinstance(kind, NormUniform):
        levels = kind.levels
        s = float(np.max(np.abs(q)))
        if s == 0.0:
            idx = np.zeros(d)
        else:
            if float(np.float32(s)) != s or s < FLOAT32_TINY:
                raise _not_in_codebook(kind)
            idx = np.round(q / s * levels)
            if not np.array_equal(s * (idx / levels) + 0.0, q):
                raise _not_in_codebook(kind)
        width = _ceil_log2(2 * levels + 1)
        parts.append(_fields_to_bits(_f32_bits([s]), 32))
        parts.append(_fields_to_bits((idx + levels).astype(np.uint64), width))
    elif isinstance(kind, LogGrid):
        a = np.abs(q)
        mant, e = np.frexp(a)
        nz = a > 0
        j = e - 1
        if np.any(nz & ((mant != 0.5) | (j < kind.k) | (j > kind.K))):
            raise _not_in_codebook(kind)
        idx = np.where(nz, j - kind.k + 1, 0)
        sign = (q < 0).astype(np.uint64)
        width = _ceil_log2(kind.K - kind.k + 2)
        fields = (sign << np.uint64(width)) | idx.astype(np.uint64)
        parts.append(_fields_to_bits(fields, 1 + width))
    elif isinstance(kind, Terngrad):
        s = float(np.max(np.abs(q)))
        if s > 0 and (float(np.float32(s)) != s or np.any((q != 0) & (np.abs(q) != s))):
            raise _not_in_codebook(kind)
        sym = np.where(q > 0, 1, np.where(q < 0, 2, 0)).astype(np.uint64)
        parts.append(_fields_to_bits(_f32_bits([s]), 32))
        parts.append(_fields_to_bits(sym, 2))
    elif isinstance(kind, TopK):
        count = kind.count(d)
        nonzero = np.flatnonzero(q)
        if nonzero.size > count:
            raise _not_in_codebook(kind)
        pad = np.flatnonzero(q == 0)[: count - nonzero.size]
        idx = np.sort(np.concatenate([nonzero, pad]))
        vals = q[idx].view(np.uint64)
        idx_bits = _fields_to_bits(idx.astype(np.uint64), _ceil_log2(d)).reshape(count, -1)
        val_bits = _fields_to_bits(vals, 64).reshape(count, 64)
        parts.append(np.concatenate([idx_bits, val_bits], axis=1).ravel())
    else:
        raise TypeError(f"unknown quantizer kind {kind!r}")

    bits = np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint8)
    return QuantizedMessage(kind, np.packbits(bits).tobytes(), int(bits.size), d)


def decode(msg: QuantizedMessage) -> np.ndarray:
    kind, d = msg.kind, msg.dim
    bits = np.unpackbits(np.frombuffer(msg.payload, dtype=np.uint8))[: msg.bit_len]
    r = _Reader(bits)

    if isinstance(kind, ExactIdentity):
        return r.take(64, d).view(np.float64).copy()
    if isinstance(kind, Identity):
        return _bits_f32(r.take(32, d))
    if isinstance(kind, NormUniform):
        levels = kind.levels
        s = float(_bits_f32(r.take(32, 1))[0])
        idx = r.take(_ceil_log2(2 * levels + 1), d).astype(np.float64) - levels
        return s * (idx / levels) + 0.0
    if isinstance(kind, LogGrid):
        width = _ceil_log2(kind.K - kind.k + 2)
        fields = r.take(1 + width, d)
        sign = (fields >> np.uint64(width)).astype(bool)
        idx = (fields & np.uint64((1 << width) - 1)).astype(np.int64)
        mag = np.where(idx > 0, np.ldexp(1.0, idx + kind.k - 1), 0.0)
        return np.where(sign, -mag, mag) + 0.0
    if isinstance(kind, Terngrad):
        s = float(_bits_f32(r.take(32, 1))[0])
        sym = r.take(2, d)
        return np.where(sym == 1, s, np.where(sym == 2, -s, 0.0)) + 0.0
    if isinstance(kind, TopK):
        count = kind.count(d)
        width = _ceil_log2(d)
        rows = bits.reshape(count, width + 64)
        idx = _bits_to_fields(rows[:, :width].ravel(), width, count).astype(np.int64)
        vals = _bits_to_fields(rows[:, width:].ravel(), 64, count).view(np.float64)
        out = np.zeros(d)
        out[idx] = vals
        return out
    raise TypeError(f"unknown quantizer kind {kind!r}")
