import math

import numpy as np
import pytest

from effadam.node import HyperParams
from effadam.quantize import ExactIdentity, LogGrid, QuantizerContract, TopK
from effadam.theory import (
    TheoryInputs,
    as_compressors,
    bits_bound,
    c1,
    c2,
    constants,
    error_floor,
    iteration_bound,
)
from oracles import compare_theory, random_theory_tuple, theory_dual

H = HyperParams(alpha=1e-3, beta=0.9, theta=0.99, epsilon=1e-8, T=5000, schedule="horizon")
DOCUMENTED = dict(G=500.0, L=4000.0, F_gap=50.0, d=500, h=H)


def _inputs(kind_w=LogGrid(-17, -11), kind_s=LogGrid(-17, -11), **kw):
    args = {**DOCUMENTED, **kw}
    return TheoryInputs.from_kinds(args["G"], args["L"], args["F_gap"], args["d"], args["h"], kind_w, kind_s, 10)


def _tuple(inp, eps):
    return dict(
        G=inp.G, L=inp.L, F_gap=inp.F_gap, d=inp.d, alpha=inp.h.alpha, beta=inp.h.beta, theta=inp.h.theta,
        eps_adam=inp.h.epsilon, T=inp.h.T, dw=inp.contract_w.delta, dwp=inp.contract_w.delta_prime,
        ds=inp.contract_s.delta, dsp=inp.contract_s.delta_prime, eps_target=eps,
    )


def test_beta_zero_gives_c1_one():
    h = HyperParams(alpha=1e-3, beta=0.0, theta=0.5, T=100, schedule="horizon")
    assert c1(_inputs(h=h)) == 1.0


def test_exact_quantizers_reduce_quantization_factor():
    ex = _inputs(ExactIdentity(), ExactIdentity())
    assert error_floor(ex) == 0.0
    # (2 - 1)(2 - 1)/(1 * 1) = 1: same C2 as writing the formula without deltas
    sg = 1 - math.sqrt(ex.gamma)
    logterm = math.log1p(ex.G**2 / (H.epsilon * ex.d)) + H.theta / (1 - H.theta)
    manual = ex.d / sg * (H.alpha**2 * ex.L / (H.theta * sg**2) + 2 * c1(ex) * ex.G * H.alpha / math.sqrt(H.theta)) * logterm
    assert c2(ex) == pytest.approx(manual, rel=1e-13)


def test_loggrid_documented_tuple_against_dual():
    inp = _inputs()
    assert compare_theory(_tuple(inp, 1.0)) == []
    ref = theory_dual(**_tuple(inp, 1.0))
    assert float(ref["error_floor"]) == pytest.approx(error_floor(inp), rel=1e-12)
    assert error_floor(inp) > 0


def test_error_floor_compressors_exactly_zero():
    assert error_floor(_inputs(TopK(0.5), ExactIdentity())) == 0.0
    assert error_floor(as_compressors(_inputs())) == 0.0


def test_error_floor_linear_in_worker_delta_prime():
    base = _inputs()

    def with_dwp(v):
        return TheoryInputs(base.G, base.L, base.F_gap, base.d, base.h, QuantizerContract(0.5, v), QuantizerContract(0.5, 0.0))

    f1, f2, f3 = error_floor(with_dwp(1e-4)), error_floor(with_dwp(2e-4)), error_floor(with_dwp(3e-4))
    assert f2 == pytest.approx(2 * f1, rel=1e-13) and f3 == pytest.approx(3 * f1, rel=1e-13)


def test_iteration_bound_scaling_and_monotonicity():
    inp = _inputs()
    ratio = iteration_bound(inp, 0.05) / iteration_bound(inp, 0.1)
    assert 3.99 <= ratio <= 4.01
    grid = np.geomspace(1e-3, 10, 40)
    vals = [iteration_bound(inp, e) for e in grid]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert iteration_bound(inp, 0.1, "half_delta") > iteration_bound(inp, 0.1, "general")
    with pytest.raises(ValueError):
        iteration_bound(inp, 0.0)
    with pytest.raises(ValueError):
        iteration_bound(inp, 0.1, "other")


def test_bits_bound_codec_and_dimension():
    C5, bw, bs = bits_bound(_inputs(), 1.0)
    assert (bw, bs) == (2000, 2000)
    assert C5 > 0
    C5_big, _, _ = bits_bound(_inputs(d=1000), 1.0)
    assert C5_big > 2 * C5


def test_bits_bound_rejects_nonpositive_log():
    h = HyperParams(alpha=1e-30, beta=0.0, theta=0.5, epsilon=1e-8, T=10, schedule="horizon")
    inp = TheoryInputs(1e-3, 1e-3, 1.0, 1, h, QuantizerContract(1.0, 0.0), QuantizerContract(1.0, 0.0))
    with pytest.raises(ValueError, match="bits bound undefined"):
        bits_bound(inp, 1e3)


def test_input_validation():
    with pytest.raises(ValueError):
        _inputs(G=0.0)
    with pytest.raises(ValueError):
        _inputs(h=HyperParams(alpha=1e-3, T=100, schedule="constant"))
    with pytest.raises(ValueError):
        TheoryInputs.from_kinds(1.0, 1.0, 1.0, 10, H, LogGrid(), __import__("effadam").Terngrad())


def test_report_fields_positive_and_finite():
    rep = constants(_inputs(), 1.0)
    for name in ("C1", "C2", "C3", "C4", "C5", "error_floor", "bits_per_iter_bound"):
        v = getattr(rep, name)
        assert math.isfinite(v) and v > 0, name
    assert isinstance(rep.T_bound, int) and rep.T_bound > 0


def test_dual_random_tuples_small():
    rng = np.random.default_rng(123)
    for _ in range(20):
        assert compare_theory(random_theory_tuple(rng)) == []
