"""Simulator for distributed Adam with two-way quantized, error-compensated communication."""

from effadam.experiment import ALGORITHMS, RunConfig, grid_search, run, run_suite
from effadam.node import HyperParams
from effadam.problems import LeastSquaresProblem, make_case
from effadam.quantize import (
    ExactIdentity,
    Identity,
    LogGrid,
    NormUniform,
    Terngrad,
    TopK,
    contract_of,
    decode,
    encode,
    message_bits,
    quantize,
)

__all__ = [
    "ALGORITHMS",
    "ExactIdentity",
    "HyperParams",
    "Identity",
    "LeastSquaresProblem",
    "LogGrid",
    "NormUniform",
    "RunConfig",
    "Terngrad",
    "TopK",
    "contract_of",
    "decode",
    "encode",
    "grid_search",
    "make_case",
    "message_bits",
    "quantize",
    "run",
    "run_suite",
]
