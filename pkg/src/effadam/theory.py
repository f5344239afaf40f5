"""Closed-form convergence constants, iteration and bit bounds.

All logarithms are natural. The constants assume the horizon schedule
(theta_t = 1 - theta/T, alpha_t = alpha/sqrt(T)); ``theta_1`` below is that
per-step value and ``gamma = beta / theta_1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

from effadam.node import HyperParams
from effadam.quantize import QuantizerContract, QuantizerKind, contract_of, message_bits


@dataclass(frozen=True)
class TheoryInputs:
    G: float
    L: float
    F_gap: float
    d: int
    h: HyperParams
    contract_w: QuantizerContract
    contract_s: QuantizerContract
    N: int = 1
    quantizer_w: Optional[QuantizerKind] = None
    quantizer_s: Optional[QuantizerKind] = None

    def __post_init__(self):
        if not (self.G > 0 and self.L > 0 and self.F_gap > 0 and self.d >= 1 and self.N >= 1):
            raise ValueError("G, L, F_gap, d and N must be positive")
        if self.h.schedule != "horizon":
            raise ValueError("the bounds are stated for the horizon schedule")
        for c in (self.contract_w, self.contract_s):
            if not c.guaranteed:
                raise ValueError("both quantizers need a (delta, delta') guarantee")
        if self.gamma >= 1.0:
            raise ValueError(f"gamma = {self.gamma} must be < 1")

    @classmethod
    def from_kinds(cls, G, L, F_gap, d, h, quantizer_w, quantizer_s, N=1) -> "TheoryInputs":
        return cls(G, L, F_gap, d, h, contract_of(quantizer_w, d), contract_of(quantizer_s, d), N, quantizer_w, quantizer_s)

    @property
    def theta_1(self) -> float:
        return 1.0 - self.h.theta / self.h.T

    @property
    def gamma(self) -> float:
        return self.h.beta / self.theta_1


@dataclass(frozen=True)
class TheoryReport:
    C1: float
    C2: float
    C3: float
    C4: float
    C5: float
    T_bound: int
    error_floor: float
    bits_per_iter_bound: float
    codec_bits_w: Optional[int] = None
    codec_bits_s: Optional[int] = None

    def lines(self) -> list[str]:
        out = []
        for name in ("C1", "C2", "C3", "C4", "C5", "T_bound", "error_floor", "bits_per_iter_bound", "codec_bits_w", "codec_bits_s"):
            out.append(f"{name} = {getattr(self, name)!r}")
        return out


def _log_term(inp: TheoryInputs) -> float:
    h = inp.h
    return math.log1p(inp.G**2 / (h.epsilon * inp.d)) + h.theta / (1.0 - h.theta)


def c1(inp: TheoryInputs) -> float:
    b = inp.h.beta
    return (b / (1.0 - b) / math.sqrt((1.0 - inp.gamma) * inp.theta_1) + 1.0) ** 2


def c2(inp: TheoryInputs, delta_w: Optional[float] = None, delta_s: Optional[float] = None) -> float:
    h = inp.h
    dw = inp.contract_w.delta if delta_w is None else delta_w
    ds = inp.contract_s.delta if delta_s is None else delta_s
    sg = 1.0 - math.sqrt(inp.gamma)
    quant = (2.0 - dw) * (2.0 - ds) * h.alpha**2 * inp.L / (h.theta * sg**2 * dw * ds)
    drift = 2.0 * c1(inp) * inp.G * h.alpha / math.sqrt(h.theta)
    return inp.d / sg * (quant + drift) * _log_term(inp)


def c3(inp: TheoryInputs) -> float:
    sg = 1.0 - math.sqrt(inp.gamma)
    return math.sqrt(inp.d / (inp.h.theta * sg**4) * _log_term(inp))


def c4(inp: TheoryInputs) -> float:
    """C2 with both deltas set to 1/2."""
    return c2(inp, 0.5, 0.5)


def iteration_bound(inp: TheoryInputs, eps: float, variant: str = "general") -> int:
    """Rounds after which min_t E||grad F(x_t)||^2 <= eps (up to the error floor).

    ``variant="general"`` uses factor 4 with C2; ``"half_delta"`` factor 16 with C4.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    h = inp.h
    if variant == "general":
        factor, C = 4.0, c2(inp)
    elif variant == "half_delta":
        factor, C = 16.0, c4(inp)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    lead = factor * (inp.G**2 + h.epsilon * inp.d) / ((1.0 - h.beta) ** 2 * h.alpha**2 * eps**2)
    return math.ceil(lead * (inp.F_gap + C) ** 2)


def error_floor(inp: TheoryInputs) -> float:
    """Additive term left by delta' > 0; exactly 0 for two compressors."""
    dw, dwp = inp.contract_w.delta, inp.contract_w.delta_prime
    ds, dsp = inp.contract_s.delta, inp.contract_s.delta_prime
    if dwp == 0.0 and dsp == 0.0:
        return 0.0
    h = inp.h
    weight = (2.0 - ds) * dsp / ds + (2.0 - ds) * (2.0 - dw) * dwp / (ds * dw)
    return weight * 2.0 * inp.L * math.sqrt(inp.G**2 + h.epsilon * inp.d) * c3(inp) / (1.0 - h.beta)


def c5(inp: TheoryInputs, eps: float) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    h = inp.h
    a = h.alpha / ((1.0 - inp.gamma) * h.theta)
    b = 24.0 * inp.L * inp.d * math.sqrt(inp.G**2 + h.epsilon * inp.d) * c3(inp) / (eps * (1.0 - h.beta))
    inner = math.log(a) + math.log(b) + 1.0
    if inner <= 0.0:
        raise ValueError(
            f"bits bound undefined: log(alpha/((1-gamma) theta)) = {math.log(a):.6g}, "
            f"log(24 L d sqrt(G^2+eps d) C3/(eps (1-beta))) = {math.log(b):.6g}, sum + 1 = {inner:.6g} <= 0"
        )
    return inp.d * (1.0 + math.log(inner))


def bits_bound(inp: TheoryInputs, eps: float) -> tuple[float, Optional[int], Optional[int]]:
    """(C5, actual uplink bits, actual downlink bits) per round and node.

    The actual counts are None when the inputs carry no quantizer kinds.
    """
    bw = message_bits(inp.quantizer_w, inp.d) if inp.quantizer_w is not None else None
    bs = message_bits(inp.quantizer_s, inp.d) if inp.quantizer_s is not None else None
    return c5(inp, eps), bw, bs


def constants(inp: TheoryInputs, eps: float, variant: str = "general") -> TheoryReport:
    C5, bw, bs = bits_bound(inp, eps)
    return TheoryReport(
        C1=c1(inp),
        C2=c2(inp),
        C3=c3(inp),
        C4=c4(inp),
        C5=C5,
        T_bound=iteration_bound(inp, eps, variant),
        error_floor=error_floor(inp),
        bits_per_iter_bound=C5,
        codec_bits_w=bw,
        codec_bits_s=bs,
    )


def as_compressors(inp: TheoryInputs) -> TheoryInputs:
    """Same inputs with both delta' set to zero."""
    w = QuantizerContract(inp.contract_w.delta, 0.0, inp.contract_w.provenance)
    s = QuantizerContract(inp.contract_s.delta, 0.0, inp.contract_s.provenance)
    return replace(inp, contract_w=w, contract_s=s)
